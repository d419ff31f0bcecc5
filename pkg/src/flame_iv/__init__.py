"""Almost-exact matching for instrumental-variable estimation on categorical covariates."""

from .data import CoarseningSpec, CovariateSchema, Dataset, coarsen, load_dataset, save_dataset, split_holdout
from .estimators import EffectEstimate, estimate_late, late_group, late_pooled, variance_report
from .matcher import MatchConfig, MatchedGroup, MatchResult, encode_units, flame_iv_run, grouped_mr

__version__ = "0.1.0"

__all__ = [
    "CoarseningSpec",
    "CovariateSchema",
    "Dataset",
    "EffectEstimate",
    "MatchConfig",
    "MatchResult",
    "MatchedGroup",
    "coarsen",
    "encode_units",
    "estimate_late",
    "flame_iv_run",
    "grouped_mr",
    "late_group",
    "late_pooled",
    "load_dataset",
    "save_dataset",
    "split_holdout",
    "variance_report",
]
