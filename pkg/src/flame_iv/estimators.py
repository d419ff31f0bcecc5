"""Intent-to-treat effects, LATE estimates and their asymptotic variances over matched groups."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset
from .errors import WeakInstrumentError
from .matcher import MatchedGroup

EXCLUDE_NO_UPTAKE = "no treatment uptake"
EXCLUDE_NO_TREATED_OR_CONTROL = "lacks treated or control units"
EXCLUDE_SMALL_ARM = "arm count below 2"


@dataclass(frozen=True)
class GroupEffect:
    gid: int
    itt_y: float
    itt_t: float
    n: int
    n0: int
    n1: int
    s2_0: float | None  # outcome variance, z=0 arm
    s2_1: float | None  # outcome variance, z=1 arm
    r2_1: float | None  # treatment variance, z=1 arm (the z=0 term is zero under monotonicity)
    cov_1: float | None  # covariance of the two ITT estimates from z=1 units

    @property
    def has_variance(self) -> bool:
        return self.n0 >= 2 and self.n1 >= 2


def group_itt(y, t, z) -> tuple[float, float]:
    """Difference in means of outcome and treatment between instrument arms."""
    y, t, z = (np.asarray(a, dtype=np.float64) for a in (y, t, z))
    on = z == 1
    if not on.any() or on.all():
        raise ValueError("a matched group needs both instrument arms")
    return float(y[on].mean() - y[~on].mean()), float(t[on].mean() - t[~on].mean())


def group_effect(gid: int, y, t, z) -> GroupEffect:
    y, t, z = (np.asarray(a, dtype=np.float64) for a in (y, t, z))
    itt_y, itt_t = group_itt(y, t, z)
    on = z == 1
    n1, n0 = int(on.sum()), int((~on).sum())
    s2_1 = r2_1 = cov_1 = s2_0 = None
    if n1 >= 2:
        y1, t1 = y[on], t[on]
        s2_1 = float(np.var(y1, ddof=1))
        r2_1 = float(np.var(t1, ddof=1))
        cov_1 = float(((y1 - y1.mean()) @ (t1 - t1.mean())) / (n1 * (n1 - 1)))
    if n0 >= 2:
        s2_0 = float(np.var(y[~on], ddof=1))
    return GroupEffect(gid, itt_y, itt_t, n1 + n0, n0, n1, s2_0, s2_1, r2_1, cov_1)


def effects_for_groups(groups: Iterable[MatchedGroup], d: Dataset) -> list[GroupEffect]:
    out = []
    for g in sorted(groups, key=lambda g: g.gid):
        rows = d.rows_for_ids(g.members)
        out.append(group_effect(g.gid, d.y[rows], d.t[rows], d.z[rows]))
    return out


def late_pooled(effects: Sequence[GroupEffect]) -> float:
    num = math.fsum(e.n * e.itt_y for e in effects)
    den = math.fsum(e.n * e.itt_t for e in effects)
    if den == 0:
        raise WeakInstrumentError("pooled effect of the instrument on treatment is zero")
    return num / den


def late_group(e: GroupEffect) -> float | None:
    """Within-group Wald ratio, or ``None`` when the instrument moved no treatment."""
    if e.itt_t == 0:
        return None
    return e.itt_y / e.itt_t


@dataclass(frozen=True)
class VarianceReport:
    itt_y: float
    itt_t: float
    var_itt_y: float
    var_itt_t: float
    cov: float
    sigma2: float


def variance_report(effects: Sequence[GroupEffect], n: int | None = None) -> VarianceReport:
    """Delta-method variance of the pooled ratio estimator.

    Groups with fewer than two units in either arm still enter the pooled
    ITT means but add nothing to the variance sums. ``n`` defaults to the
    total size of ``effects``.
    """
    effects = sorted(effects, key=lambda e: e.gid)
    if n is None:
        n = sum(e.n for e in effects)
    w = [e.n / n for e in effects]
    itt_y = math.fsum(wi * e.itt_y for wi, e in zip(w, effects))
    itt_t = math.fsum(wi * e.itt_t for wi, e in zip(w, effects))
    if itt_t == 0:
        raise WeakInstrumentError("pooled effect of the instrument on treatment is zero")
    usable = [(wi, e) for wi, e in zip(w, effects) if e.has_variance]
    var_y = math.fsum(wi**2 * (e.s2_1 / e.n1 + e.s2_0 / e.n0) for wi, e in usable)
    var_t = math.fsum(wi**2 * e.r2_1 / e.n1 for wi, e in usable)
    cov = math.fsum(wi**2 * e.cov_1 for wi, e in usable)
    sigma2 = var_y / itt_t**2 + itt_y**2 * var_t / itt_t**4 - 2 * itt_y * cov / itt_t**3
    # the delta-method expression is a quadratic form in a PSD matrix, so any
    # negative value is round-off
    return VarianceReport(itt_y, itt_t, var_y, var_t, cov, max(sigma2, 0.0))


def normal_quantile(q: float) -> float:
    return NormalDist().inv_cdf(q)


def confidence_interval(estimate: float, sigma2: float, alpha: float = 0.05) -> tuple[float, float]:
    if sigma2 < 0:
        raise ValueError("variance must be nonnegative")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    half = normal_quantile(1 - alpha / 2) * math.sqrt(sigma2)
    return estimate - half, estimate + half


@dataclass
class EffectEstimate:
    estimate: float
    sigma2: float
    ci: tuple[float, float]
    alpha: float
    n_used: int
    groups_used: int
    excluded: list[tuple[int, str]] = field(default_factory=list)
    variance_excluded: list[int] = field(default_factory=list)
    variance: VarianceReport | None = None

    @property
    def se(self) -> float:
        return math.sqrt(self.sigma2)

    def to_dict(self) -> dict:
        out = {
            "estimate": self.estimate,
            "sigma2": self.sigma2,
            "se": self.se,
            "ci": list(self.ci),
            "alpha": self.alpha,
            "n_used": self.n_used,
            "groups_used": self.groups_used,
            "excluded": [{"group_id": g, "reason": r} for g, r in self.excluded],
            "variance_excluded": list(self.variance_excluded),
        }
        if self.variance is not None:
            out["variance"] = {
                "itt_y": self.variance.itt_y,
                "itt_t": self.variance.itt_t,
                "var_itt_y": self.variance.var_itt_y,
                "var_itt_t": self.variance.var_itt_t,
                "cov": self.variance.cov,
            }
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    def table(self) -> str:
        lo, hi = self.ci
        level = round(100 * (1 - self.alpha), 6)
        lines = [
            f"LATE estimate      {self.estimate:.6g}",
            f"std. error         {self.se:.6g}",
            f"{level:g}% CI{'':<11}({lo:.6g}, {hi:.6g})",
            f"units used         {self.n_used}",
            f"groups used        {self.groups_used}",
            f"groups excluded    {len(self.excluded)}",
            f"no variance terms  {len(self.variance_excluded)}",
        ]
        for gid, reason in self.excluded:
            lines.append(f"  group {gid}: {reason}")
        return "\n".join(lines)


def _lacks_treated_or_control(d: Dataset, g: MatchedGroup) -> bool:
    t = d.t[d.rows_for_ids(g.members)]
    return bool(np.all(t > 0) or np.all(t <= 0))


def estimate_late(
    groups: Sequence[MatchedGroup], d: Dataset, alpha: float = 0.05, strict: bool = False
) -> EffectEstimate:
    """Pooled LATE with delta-method confidence interval.

    In ``strict`` mode groups whose units are all treated or all untreated
    are dropped before pooling.
    """
    excluded = []
    kept = []
    for g in sorted(groups, key=lambda g: g.gid):
        if strict and _lacks_treated_or_control(d, g):
            excluded.append((g.gid, EXCLUDE_NO_TREATED_OR_CONTROL))
        else:
            kept.append(g)
    effects = effects_for_groups(kept, d)
    n = sum(e.n for e in effects)
    if not effects:
        raise WeakInstrumentError("no matched groups available for estimation")
    lam = late_pooled(effects)
    report = variance_report(effects, n)
    return EffectEstimate(
        estimate=lam,
        sigma2=report.sigma2,
        ci=confidence_interval(lam, report.sigma2, alpha),
        alpha=alpha,
        n_used=n,
        groups_used=len(effects),
        excluded=excluded,
        variance_excluded=[e.gid for e in effects if not e.has_variance],
        variance=report,
    )


@dataclass(frozen=True)
class GroupRow:
    gid: int
    iteration: int
    n: int
    n0: int
    n1: int
    itt_y: float
    itt_t: float
    late: float | None
    reason: str | None


def per_group_table(groups: Sequence[MatchedGroup], d: Dataset) -> list[GroupRow]:
    by_id = {g.gid: g for g in groups}
    rows = []
    for e in effects_for_groups(groups, d):
        lam = late_group(e)
        rows.append(
            GroupRow(
                e.gid, by_id[e.gid].iteration, e.n, e.n0, e.n1, e.itt_y, e.itt_t,
                lam, None if lam is not None else EXCLUDE_NO_UPTAKE,
            )
        )
    return rows


def write_group_csv(rows: Sequence[GroupRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group_id", "iteration", "n", "n0", "n1", "itt_y", "itt_t", "late", "exclusion"])
        for r in rows:
            writer.writerow(
                [r.gid, r.iteration, r.n, r.n0, r.n1, repr(r.itt_y), repr(r.itt_t),
                 "" if r.late is None else repr(r.late), r.reason or ""]
            )
