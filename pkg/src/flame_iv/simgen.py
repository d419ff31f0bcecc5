"""Simulated IV datasets, the 2SLS baseline, and the Monte Carlo benchmark harness."""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CovariateSchema, Dataset
from .errors import ConfigurationError, FlameIVError, RankDeficiencyError, WeakInstrumentError
from .estimators import effects_for_groups, estimate_late, late_group
from .matcher import MatchConfig, MatchedGroup, design_matrix, flame_iv_run

MODELS = ("linear", "nonlinear", "hetero-linear", "hetero-nonlinear")
INSTRUMENT_MODES = ("randomized", "confounded")
THRESHOLDS = (0.3, 0.6, 1.0)
HOMOGENEOUS_EFFECT = 10.0


@dataclass(frozen=True)
class DgpConfig:
    n: int = 1000  # units per instrument arm; total 2n
    p: int = 10
    n_important: int = 8
    pi: float = 1.0
    intercept: float = 0.0
    rho: float = 0.3  # loading of each important covariate on the latent exposure
    noise_sd: float = 0.8
    outcome_sd: float = 0.0
    model: str = "linear"
    instrument: str = "randomized"
    unimportant_by: str = "instrument"  # or "treatment"
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("n must be >= 1")
        if not 0 <= self.n_important <= self.p:
            raise ConfigurationError("important covariate count must lie in [0, p]")
        if self.noise_sd <= 0:
            raise ConfigurationError("noise sd must be positive")
        if self.outcome_sd < 0:
            raise ConfigurationError("outcome noise sd must be >= 0")
        if self.model not in MODELS:
            raise ConfigurationError(f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")
        if self.instrument not in INSTRUMENT_MODES:
            raise ConfigurationError(f"unknown instrument mode {self.instrument!r}")
        if self.unimportant_by not in ("instrument", "treatment"):
            raise ConfigurationError("unimportant_by must be 'instrument' or 'treatment'")

    @property
    def heterogeneous(self) -> bool:
        return self.model.startswith("hetero")

    @property
    def nonlinear(self) -> bool:
        return self.model.endswith("nonlinear")


@dataclass(frozen=True)
class DgpParameters:
    alpha: np.ndarray
    beta: np.ndarray | None  # per-covariate effect slopes, heterogeneous models only
    rho: np.ndarray
    confounding: np.ndarray | None  # instrument loadings on the last two covariates


@dataclass(frozen=True, eq=False)
class SimTruth:
    t0: np.ndarray
    t1: np.ndarray
    y_levels: np.ndarray  # (n, 4): potential outcome at exposure 0..3
    effect: np.ndarray  # per-unit effect of one exposure step
    params: DgpParameters

    @property
    def complier(self) -> np.ndarray:
        return self.t1 > self.t0

    def sample_late(self) -> float:
        """Average outcome change per unit of induced treatment, over the sample."""
        rows = np.arange(self.t0.size)
        dy = self.y_levels[rows, self.t1] - self.y_levels[rows, self.t0]
        dt = (self.t1 - self.t0).sum()
        if dt == 0:
            raise WeakInstrumentError("instrument induces no treatment change in the sample")
        return float(dy.sum() / dt)


def _streams(seed: int):
    return np.random.SeedSequence(seed).spawn(3)


def draw_parameters(cfg: DgpConfig) -> DgpParameters:
    rng = np.random.default_rng(_streams(cfg.seed)[0])
    p = cfg.p
    rho = np.zeros(p)
    rho[: cfg.n_important] = cfg.rho
    beta = None
    if cfg.heterogeneous:
        s = rng.choice([-1.0, 1.0], size=p)
        alpha = rng.normal(10.0 * s, 1.0)
        beta = rng.normal(1.5, 0.15, size=p)
    else:
        alpha = 0.5 ** np.arange(1, p + 1)
    confounding = None
    if cfg.instrument == "confounded":
        confounding = rng.normal(0.1, 0.01, size=min(2, p))
    return DgpParameters(alpha, beta, rho, confounding)


def discretize(t_star: np.ndarray) -> np.ndarray:
    return np.searchsorted(np.asarray(THRESHOLDS), t_star, side="left").astype(np.int64)


def _interactions(x: np.ndarray) -> np.ndarray:
    q = min(5, x.shape[1])
    out = np.zeros(x.shape[0])
    for j in range(q):
        for g in range(j + 1, q):
            out += x[:, j] * x[:, g]
    return out


def _units(cfg: DgpConfig, params: DgpParameters, n_per_arm: int, rng: np.random.Generator):
    p, total = cfg.p, 2 * n_per_arm
    imp = cfg.n_important
    x = np.zeros((total, p), dtype=np.int64)
    x[:, :imp] = rng.random((total, imp)) < 0.5
    xi = rng.normal(0.0, cfg.noise_sd, size=total)
    eps = rng.normal(0.0, cfg.outcome_sd, size=total) if cfg.outcome_sd > 0 else np.zeros(total)
    if cfg.instrument == "randomized":
        z = rng.permutation(np.repeat([0, 1], n_per_arm))
    else:
        x[:, imp:] = rng.random((total, p - imp)) < 0.5
        tail = x[:, p - params.confounding.size :].astype(np.float64)
        score = tail @ params.confounding
        z = (score >= np.median(score)).astype(np.int64)
    base = cfg.intercept + x[:, :imp] @ params.rho[:imp]
    t0 = discretize(base + xi)
    t1 = discretize(base + cfg.pi + xi)
    if cfg.pi >= 0:
        # shared thresholds make exposure monotone in the instrument
        assert np.all(t1 >= t0)
    t = np.where(z == 1, t1, t0)
    if cfg.instrument == "randomized" and p > imp:
        arm = z if cfg.unimportant_by == "instrument" else (t > 0).astype(np.int64)
        prob = np.where(arm == 1, 0.9, 0.1)[:, None]
        x[:, imp:] = rng.random((total, p - imp)) < prob
    effect = HOMOGENEOUS_EFFECT * np.ones(total) if params.beta is None else x @ params.beta
    baseline = x @ params.alpha + eps
    if cfg.nonlinear:
        baseline = baseline + _interactions(x)
    y_levels = baseline[:, None] + np.arange(4)[None, :] * effect[:, None]
    y = y_levels[np.arange(total), t]
    schema = CovariateSchema(tuple(f"x{j}" for j in range(p)), (2,) * p)
    d = Dataset(x, z, t.astype(np.float64), y, schema)
    return d, SimTruth(t0, t1, y_levels, effect, params)


def gen_dataset(cfg: DgpConfig) -> tuple[Dataset, SimTruth]:
    """Training sample with 2 * cfg.n units and its counterfactual record."""
    params = draw_parameters(cfg)
    return _units(cfg, params, cfg.n, np.random.default_rng(_streams(cfg.seed)[1]))


def gen_holdout(cfg: DgpConfig, n: int | None = None) -> tuple[Dataset, SimTruth]:
    """Independent sample from the same parameter draw as :func:`gen_dataset`."""
    params = draw_parameters(cfg)
    return _units(cfg, params, n or cfg.n, np.random.default_rng(_streams(cfg.seed)[2]))


# --- regression baselines ---------------------------------------------------------


def _covariate_block(d: Dataset) -> np.ndarray:
    return design_matrix(d, np.ones(d.p, dtype=bool))[:, 2:]


def _check_rank(a: np.ndarray, what: str):
    if np.linalg.matrix_rank(a) < a.shape[1]:
        raise RankDeficiencyError(f"{what} design matrix is singular")


def _ols(a: np.ndarray, b: np.ndarray):
    coef, *_ = np.linalg.lstsq(a, b, rcond=None)
    resid = b - a @ coef
    return coef, float(resid @ resid)


@dataclass(frozen=True)
class TwoSLSResult:
    estimate: float
    se: float

    def ci(self, alpha: float = 0.05) -> tuple[float, float]:
        from .estimators import confidence_interval

        return confidence_interval(self.estimate, self.se**2, alpha)


def two_sls(d: Dataset) -> TwoSLSResult:
    """Just-identified 2SLS of y on t with instrument z, controlling for all covariates."""
    n = d.n
    xs = _covariate_block(d)
    ones = np.ones((n, 1))
    first = np.hstack([ones, d.z[:, None].astype(np.float64), xs])
    _check_rank(first, "first-stage")
    gamma, _ = _ols(first, d.t)
    scale = max(1.0, float(np.abs(d.t).max()))
    if abs(gamma[1]) <= 1e-12 * scale:
        raise WeakInstrumentError("first-stage coefficient on the instrument is zero")
    t_hat = first @ gamma
    second = np.hstack([ones, t_hat[:, None], xs])
    if np.linalg.matrix_rank(second) < second.shape[1]:
        raise WeakInstrumentError("fitted treatment is collinear with the covariates")
    beta, _ = _ols(second, d.y)
    structural = np.hstack([ones, d.t[:, None], xs])
    resid = d.y - structural @ beta
    dof = n - second.shape[1]
    if dof <= 0:
        raise RankDeficiencyError("not enough units for the number of regressors")
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(second.T @ second)
    return TwoSLSResult(float(beta[1]), float(math.sqrt(max(cov[1, 1], 0.0))))


def first_stage_f(d: Dataset) -> float:
    """Partial F statistic for z in the regression of t on (1, z, covariates)."""
    xs = _covariate_block(d)
    n = d.n
    if n <= d.p + 2:
        raise ConfigurationError("first-stage F needs more units than regressors")
    ones = np.ones((n, 1))
    full = np.hstack([ones, d.z[:, None].astype(np.float64), xs])
    _check_rank(full, "first-stage")
    _, rss_u = _ols(full, d.t)
    _, rss_r = _ols(np.hstack([ones, xs]), d.t)
    dof = n - full.shape[1]
    if rss_u == 0:
        return math.inf if rss_r > 0 else 0.0
    return (rss_r - rss_u) / (rss_u / dof)


# --- per-group truth --------------------------------------------------------------


@dataclass(frozen=True)
class GroupTruth:
    gid: int
    effect: float | None
    compliers: int


def true_group_effects(groups: Sequence[MatchedGroup], truth: SimTruth, d: Dataset) -> list[GroupTruth]:
    """Mean unit effect over each group's compliers; ``None`` when it has none."""
    out = []
    complier = truth.complier
    for g in sorted(groups, key=lambda g: g.gid):
        rows = d.rows_for_ids(g.members)
        c = rows[complier[rows]]
        out.append(GroupTruth(g.gid, float(truth.effect[c].mean()) if c.size else None, int(c.size)))
    return out


# --- benchmark --------------------------------------------------------------------

METHODS = ("flame-iv", "flame-iv-full", "2sls")


def replication_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, rep]).generate_state(1)[0])


@dataclass
class MethodOutcome:
    estimate: float = math.nan
    ci: tuple[float, float] = (math.nan, math.nan)
    runtime: float = 0.0
    error: str | None = None


@dataclass
class Replication:
    rep: int
    seed: int
    truth: float
    first_stage_f: float
    outcomes: dict[str, MethodOutcome]


def _run_method(method: str, train: Dataset, holdout: Dataset, match_cfg: MatchConfig) -> MethodOutcome:
    start = time.perf_counter()
    try:
        if method == "2sls":
            res = two_sls(train)
            est, ci = res.estimate, res.ci()
        else:
            cfg = match_cfg if method == "flame-iv" else replace(match_cfg, early_stop=None)
            result = flame_iv_run(train, holdout, cfg)
            eff = estimate_late(result.groups, train)
            est, ci = eff.estimate, eff.ci
    except FlameIVError as exc:
        return MethodOutcome(runtime=time.perf_counter() - start, error=f"{type(exc).__name__}: {exc}")
    return MethodOutcome(float(est), (float(ci[0]), float(ci[1])), time.perf_counter() - start)


def run_replication(cfg: DgpConfig, methods: Sequence[str], rep: int, match_cfg: MatchConfig) -> Replication:
    seed = replication_seed(cfg.seed, rep)
    rcfg = replace(cfg, seed=seed)
    train, truth = gen_dataset(rcfg)
    holdout, _ = gen_holdout(rcfg)
    try:
        f_stat = first_stage_f(train)
    except FlameIVError:
        f_stat = math.nan
    outcomes = {m: _run_method(m, train, holdout, match_cfg) for m in methods}
    return Replication(rep, seed, truth.sample_late(), f_stat, outcomes)


@dataclass
class MethodMetrics:
    estimates: list[float]
    failures: int
    bias_of_median: float
    mad: float
    median_ci_width: float
    mean_runtime: float


@dataclass
class BenchmarkMetrics:
    config: dict
    replications: int
    methods: dict[str, MethodMetrics]
    median_first_stage_f: float
    runs: list[Replication] = field(default_factory=list, repr=False)

    def to_dict(self, include_runtime: bool = True) -> dict:
        methods = {}
        for name, m in sorted(self.methods.items()):
            entry = asdict(m)
            if not include_runtime:
                entry.pop("mean_runtime")
            methods[name] = entry
        return {
            "config": self.config,
            "replications": self.replications,
            "median_first_stage_f": self.median_first_stage_f,
            "methods": methods,
        }


def bias_and_mad(estimates, truth) -> tuple[float, float]:
    """Absolute bias of the median estimate and median absolute deviation from truth."""
    est = np.asarray(estimates, dtype=np.float64)
    truth = np.broadcast_to(np.asarray(truth, dtype=np.float64), est.shape)
    if est.size == 0:
        return math.nan, math.nan
    return float(abs(np.median(est) - np.median(truth))), float(np.median(np.abs(est - truth)))


def summarize(cfg: DgpConfig, methods: Sequence[str], runs: Sequence[Replication]) -> BenchmarkMetrics:
    runs = sorted(runs, key=lambda r: r.rep)
    out = {}
    for m in methods:
        ok = [r for r in runs if r.outcomes[m].error is None]
        est = [r.outcomes[m].estimate for r in ok]
        bias, mad = bias_and_mad(est, [r.truth for r in ok])
        widths = [r.outcomes[m].ci[1] - r.outcomes[m].ci[0] for r in ok]
        out[m] = MethodMetrics(
            estimates=est,
            failures=len(runs) - len(ok),
            bias_of_median=bias,
            mad=mad,
            median_ci_width=float(np.median(widths)) if widths else math.nan,
            mean_runtime=float(np.mean([r.outcomes[m].runtime for r in runs])) if runs else 0.0,
        )
    fs = [r.first_stage_f for r in runs if np.isfinite(r.first_stage_f)]
    return BenchmarkMetrics(
        config=asdict(cfg),
        replications=len(runs),
        methods=out,
        median_first_stage_f=float(np.median(fs)) if fs else math.nan,
        runs=list(runs),
    )


def run_benchmark(
    cfg: DgpConfig,
    methods: Sequence[str] = ("flame-iv", "2sls"),
    replications: int = 100,
    match_cfg: MatchConfig | None = None,
    workers: int = 1,
) -> BenchmarkMetrics:
    """Fresh dataset per replication; each method estimates the LATE.

    Replication ``r`` draws from a seed derived from ``(cfg.seed, r)``, so
    the result does not depend on ``workers``.
    """
    if replications < 1:
        raise ConfigurationError("need at least one replication")
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ConfigurationError(f"unknown methods {sorted(unknown)}; choose from {', '.join(METHODS)}")
    match_cfg = match_cfg or MatchConfig()
    methods = list(dict.fromkeys(methods))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(run_replication, cfg, methods, r, match_cfg) for r in range(replications)]
            runs = [f.result() for f in futures]
    else:
        runs = [run_replication(cfg, methods, r, match_cfg) for r in range(replications)]
    return summarize(cfg, methods, runs)


def write_replications_csv(metrics: BenchmarkMetrics, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rep", "seed", "method", "estimate", "ci_lo", "ci_hi", "truth", "first_stage_f", "error"])
        for r in metrics.runs:
            for m in sorted(r.outcomes):
                o = r.outcomes[m]
                writer.writerow(
                    [r.rep, r.seed, m, repr(o.estimate), repr(o.ci[0]), repr(o.ci[1]), repr(r.truth),
                     repr(r.first_stage_f), o.error or ""]
                )


def write_metrics_json(metrics: BenchmarkMetrics, path, include_runtime: bool = True) -> None:
    Path(path).write_text(json.dumps(metrics.to_dict(include_runtime), indent=2, sort_keys=True))


def strength_sweep(
    cfg: DgpConfig,
    pis: Sequence[float],
    methods: Sequence[str] = ("flame-iv", "2sls"),
    replications: int = 100,
    match_cfg: MatchConfig | None = None,
    workers: int = 1,
) -> list[BenchmarkMetrics]:
    return [run_benchmark(replace(cfg, pi=pi), methods, replications, match_cfg, workers) for pi in pis]


def write_strength_csv(sweep: Sequence[BenchmarkMetrics], path) -> None:
    """Plot-ready rows: instrument strength and first-stage F against bias and MAD per method."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pi", "median_first_stage_f", "method", "bias_of_median", "mad", "failures"])
        for m in sweep:
            for name, mm in sorted(m.methods.items()):
                writer.writerow(
                    [m.config["pi"], repr(m.median_first_stage_f), name, repr(mm.bias_of_median), repr(mm.mad),
                     mm.failures]
                )


def write_group_pairs_csv(pairs, path) -> None:
    """Plot-ready rows of (true group effect, estimated group effect)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group_id", "compliers", "true_effect", "estimated_effect"])
        for gid, compliers, true, est in pairs:
            writer.writerow([gid, compliers, repr(true), repr(est)])


def group_effect_pairs(
    cfg: DgpConfig, match_cfg: MatchConfig | None = None, replications: int = 1, min_compliers: int = 5
) -> list[tuple[str, int, float, float]]:
    """True and estimated per-group effects pooled over replications.

    Rows are ``("rep:gid", compliers, true effect, estimated effect)``;
    groups with zero uptake or fewer than ``min_compliers`` compliers are left out.
    """
    match_cfg = match_cfg or MatchConfig()
    pairs = []
    for rep in range(replications):
        rcfg = replace(cfg, seed=replication_seed(cfg.seed, rep))
        d, truth = gen_dataset(rcfg)
        h, _ = gen_holdout(rcfg)
        result = flame_iv_run(d, h, match_cfg)
        truths = {g.gid: g for g in true_group_effects(result.groups, truth, d)}
        for e in effects_for_groups(result.groups, d):
            lam = late_group(e)
            gt = truths[e.gid]
            if lam is None or gt.effect is None or gt.compliers < min_compliers:
                continue
            pairs.append((f"{rep}:{e.gid}", gt.compliers, gt.effect, lam))
    return pairs
