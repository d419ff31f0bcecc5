"""FLAME-IV: greedy almost-exact matching with an instrument.

Matching on a covariate subset is done with integer encodings of the active
covariates (see :func:`encode_units`): a unit is matched when its covariate
code occurs in both instrument arms. Covariates are dropped one at a time,
choosing the drop that maximises ``C * BF - PE`` where PE is a holdout
regression error and BF the fraction of each arm that gets matched.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigurationError

log = logging.getLogger(__name__)

INT64_LIMIT = 2**63 - 1

STOP_ALL_MATCHED = "all matched"
STOP_NO_COVARIATES = "no covariates left"
STOP_ARM_EXHAUSTED = "one instrument arm exhausted"
STOP_DEGRADATION = "match quality degradation"


def as_mask(mask, p: int) -> np.ndarray:
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if m.shape != (p,):
        raise ConfigurationError(f"mask length {m.shape[0]} does not match p={p}")
    return m


def mask_to_bits(mask) -> str:
    return "".join("1" if b else "0" for b in mask)


def bits_to_mask(bits: str) -> tuple[bool, ...]:
    return tuple(c == "1" for c in bits)


@dataclass(frozen=True, eq=False)
class BitEncoding:
    """Integer codes of the active covariates, with and without the instrument.

    ``order`` lists the active covariate indices in radix order (ascending
    cardinality, ties by index); ``b`` and ``b_plus`` are int64 arrays, or
    object arrays of Python ints when the code space exceeds 63 bits.
    """

    b: np.ndarray
    b_plus: np.ndarray
    c: np.ndarray
    c_plus: np.ndarray
    order: tuple[int, ...]
    radix: tuple[int, ...]

    @property
    def matched(self) -> np.ndarray:
        return self.c != self.c_plus


def radix_order(cardinalities: Sequence[int], mask) -> list[int]:
    active = [j for j in range(len(cardinalities)) if mask[j]]
    return sorted(active, key=lambda j: (cardinalities[j], j))


def encode_units(d: Dataset, mask, rows=None) -> BitEncoding:
    """Encode units (optionally only ``rows``) on the covariates active in ``mask``.

    With the active covariates renumbered ``0..q-1`` in ascending-cardinality
    order, ``b = sum_j a_j k_j**j`` and ``b_plus = z + sum_j a_j k_j**(j+1)``.
    Counts are taken over the encoded units only.
    """
    mask = as_mask(mask, d.p)
    card = d.schema.cardinalities
    order = radix_order(card, mask)
    radix = tuple(card[j] for j in order)
    x = d.x if rows is None else d.x[rows]
    z = d.z if rows is None else d.z[rows]
    top = 1 + sum((k - 1) * k ** (j + 1) for j, k in enumerate(radix))
    if top <= INT64_LIMIT:
        b = np.zeros(x.shape[0], dtype=np.int64)
        b_plus = z.astype(np.int64, copy=True)
        for j, (col, k) in enumerate(zip(order, radix)):
            a = x[:, col]
            w = k**j
            b += a * w
            b_plus += a * (w * k)
    else:
        b = np.zeros(x.shape[0], dtype=object)
        b_plus = z.astype(object)
        for j, (col, k) in enumerate(zip(order, radix)):
            a = x[:, col].astype(object)
            w = k**j
            b = b + a * w
            b_plus = b_plus + a * (w * k)
    c = _occurrences(b)
    c_plus = _occurrences(b_plus)
    return BitEncoding(b, b_plus, c, c_plus, tuple(order), radix)


def _occurrences(codes: np.ndarray) -> np.ndarray:
    if codes.size == 0:
        return np.zeros(0, dtype=np.int64)
    _, inverse, counts = np.unique(codes, return_inverse=True, return_counts=True)
    return counts[inverse.reshape(-1)]


@dataclass(frozen=True, eq=False)
class MatchedGroup:
    gid: int
    mask: tuple[bool, ...]
    signature: tuple[int, ...]  # covariate values on the active covariates, in index order
    members: np.ndarray  # unit ids, ascending
    iteration: int
    n: int
    n1: int
    n0: int

    def to_dict(self) -> dict:
        return {
            "id": self.gid,
            "theta": mask_to_bits(self.mask),
            "signature": list(self.signature),
            "members": self.members.tolist(),
            "iteration": self.iteration,
            "n": self.n,
            "n1": self.n1,
            "n0": self.n0,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "MatchedGroup":
        return cls(
            gid=int(raw["id"]),
            mask=bits_to_mask(raw["theta"]),
            signature=tuple(int(v) for v in raw["signature"]),
            members=np.asarray(raw["members"], dtype=np.int64),
            iteration=int(raw["iteration"]),
            n=int(raw["n"]),
            n1=int(raw["n1"]),
            n0=int(raw["n0"]),
        )


def _matched_rows(d: Dataset, rows: np.ndarray, mask) -> tuple[np.ndarray, BitEncoding]:
    enc = encode_units(d, mask, rows)
    return rows[enc.matched], enc


def grouped_mr(
    d: Dataset, unmatched_rows, mask, iteration: int = 0, first_gid: int = 0
) -> tuple[list[MatchedGroup], np.ndarray]:
    """Exact-match the ``unmatched_rows`` of ``d`` on the covariates in ``mask``.

    Returns the groups that contain both instrument arms and the row
    positions (into ``d``) of the units they cover. Groups are numbered from
    ``first_gid`` in ascending order of their code.
    """
    mask = tuple(bool(v) for v in as_mask(mask, d.p))
    rows = np.asarray(unmatched_rows, dtype=np.int64)
    if rows.size == 0:
        return [], rows
    matched, enc = _matched_rows(d, rows, mask)
    if matched.size == 0:
        return [], matched
    codes = enc.b[enc.matched]
    _, inverse = np.unique(codes, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.lexsort((d.ids[matched], inverse))
    bounds = np.flatnonzero(np.diff(inverse[order])) + 1
    active = [j for j in range(d.p) if mask[j]]
    groups = []
    for k, chunk in enumerate(np.split(order, bounds)):
        member_rows = matched[chunk]
        n1 = int(d.z[member_rows].sum())
        signature = tuple(int(v) for v in d.x[member_rows[0], active])
        groups.append(
            MatchedGroup(
                gid=first_gid + k,
                mask=mask,
                signature=signature,
                members=d.ids[member_rows].copy(),
                iteration=iteration,
                n=len(member_rows),
                n1=n1,
                n0=len(member_rows) - n1,
            )
        )
    return groups, np.sort(matched)


# --- match quality ----------------------------------------------------------------


def design_matrix(d: Dataset, mask) -> np.ndarray:
    """Intercept, instrument, then one indicator per non-baseline level of each active covariate."""
    mask = as_mask(mask, d.p)
    cols = [np.ones(d.n), d.z.astype(np.float64)]
    for j in np.flatnonzero(mask):
        for level in range(1, d.schema.cardinalities[j]):
            cols.append((d.x[:, j] == level).astype(np.float64))
    return np.column_stack(cols)


def _ridge_rss(design: np.ndarray, y: np.ndarray, ridge: float) -> float:
    if ridge > 0:
        k = design.shape[1]
        penalty = np.sqrt(ridge) * np.eye(k)[1:]  # intercept unpenalised
        a = np.vstack([design, penalty])
        rhs = np.concatenate([y, np.zeros(k - 1)])
    else:
        a, rhs = design, y
    coef, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    resid = y - design @ coef
    return float(resid @ resid)


def prediction_error(holdout: Dataset | None, mask, ridge: float = 1e-6) -> float:
    """Residual sum of squares of a ridge-penalised linear fit of y on (masked x, z).

    Categorical covariates enter as level indicators, so binary covariates
    enter as themselves.
    """
    if holdout is None or holdout.n == 0:
        raise ConfigurationError("prediction error needs a non-empty holdout set")
    if ridge < 0:
        raise ConfigurationError("ridge penalty must be >= 0")
    return _ridge_rss(design_matrix(holdout, mask), holdout.y, ridge)


class _HoldoutErrors:
    """Memoised PE lookups for one holdout set; column blocks built once."""

    def __init__(self, holdout: Dataset, ridge: float):
        self.holdout = holdout
        self.ridge = ridge
        self.base = np.column_stack([np.ones(holdout.n), holdout.z.astype(np.float64)])
        self.blocks = [
            np.column_stack([(holdout.x[:, j] == lv).astype(np.float64) for lv in range(1, k)])
            for j, k in enumerate(holdout.schema.cardinalities)
        ]
        self.cache: dict[tuple[bool, ...], float] = {}

    def __call__(self, mask: tuple[bool, ...]) -> float:
        pe = self.cache.get(mask)
        if pe is None:
            design = np.hstack([self.base] + [self.blocks[j] for j in range(len(mask)) if mask[j]])
            pe = _ridge_rss(design, self.holdout.y, self.ridge)
            self.cache[mask] = pe
        return pe


def balancing_factor(available_1: int, available_0: int, matched_1: int, matched_0: int) -> float | None:
    """Matched fraction of non-instrumented plus matched fraction of instrumented units.

    Returns ``None`` when an arm has nothing available; the run stops before
    that can happen (see :func:`check_stop`).
    """
    if available_1 <= 0 or available_0 <= 0:
        return None
    if not (0 <= matched_1 <= available_1 and 0 <= matched_0 <= available_0):
        raise ValueError("matched counts must lie between 0 and the available counts")
    return matched_0 / available_0 + matched_1 / available_1


def match_quality(pe: float, bf: float, c: float) -> float:
    return c * bf - pe


def best_candidate(scores: Sequence[tuple[int, float]]) -> int:
    """Covariate index with the largest score; ties go to the lowest index."""
    best_j, best_q = None, -np.inf
    for j, q in sorted(scores):
        if q > best_q:
            best_j, best_q = j, q
    if best_j is None:
        best_j = min(j for j, _ in scores)
    return best_j


# --- configuration, stopping ------------------------------------------------------


@dataclass(frozen=True)
class MatchConfig:
    tradeoff_c: float = 0.1
    early_stop: float | None = 0.05  # None disables the PE degradation rule
    ridge: float = 1e-6
    holdout_fraction: float = 0.15
    threads: int = 1

    def __post_init__(self):
        if self.tradeoff_c < 0:
            raise ConfigurationError("tradeoff constant C must be >= 0")
        if self.early_stop is not None and self.early_stop < 0:
            raise ConfigurationError("early-stop tolerance must be >= 0")
        if self.ridge < 0:
            raise ConfigurationError("ridge penalty must be >= 0")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigurationError("holdout fraction must lie in [0, 1)")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")


@dataclass(frozen=True)
class IterationState:
    unmatched_1: int
    unmatched_0: int
    active: int
    best_pe: float | None = None


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    reason: str | None = None

    def __bool__(self):
        return self.stop


def check_stop(state: IterationState, cfg: MatchConfig, pe_baseline: float) -> StopDecision:
    if state.unmatched_1 + state.unmatched_0 == 0:
        return StopDecision(True, STOP_ALL_MATCHED)
    if state.active == 0:
        return StopDecision(True, STOP_NO_COVARIATES)
    if state.unmatched_1 == 0 or state.unmatched_0 == 0:
        return StopDecision(True, STOP_ARM_EXHAUSTED)
    if (
        cfg.early_stop is not None
        and state.best_pe is not None
        and state.best_pe > pe_baseline * (1.0 + cfg.early_stop)
    ):
        return StopDecision(True, STOP_DEGRADATION)
    return StopDecision(False)


# --- results ----------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateScore:
    covariate: int
    pe: float
    bf: float
    mq: float
    newly_matched: int


@dataclass
class IterationLog:
    iteration: int
    active: str
    candidates: list[CandidateScore] = field(default_factory=list)
    dropped: int | None = None
    matched: int = 0


@dataclass
class MatchResult:
    names: tuple[str, ...]
    drop_sequence: list[int]
    groups: list[MatchedGroup]
    unmatched: np.ndarray
    log: list[IterationLog]
    stop_reason: str
    pe_baseline: float

    @property
    def matched_ids(self) -> np.ndarray:
        if not self.groups:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate([g.members for g in self.groups]))

    def to_dict(self) -> dict:
        return {
            "covariates": list(self.names),
            "drop_sequence": list(self.drop_sequence),
            "stop_reason": self.stop_reason,
            "pe_baseline": self.pe_baseline,
            "log": [
                {
                    "iteration": it.iteration,
                    "active": it.active,
                    "dropped": it.dropped,
                    "matched": it.matched,
                    "candidates": [asdict(c) for c in it.candidates],
                }
                for it in self.log
            ],
            "groups": [g.to_dict() for g in self.groups],
            "unmatched": self.unmatched.tolist(),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "MatchResult":
        log_entries = [
            IterationLog(
                iteration=e["iteration"],
                active=e["active"],
                candidates=[CandidateScore(**c) for c in e["candidates"]],
                dropped=e["dropped"],
                matched=e["matched"],
            )
            for e in raw["log"]
        ]
        return cls(
            names=tuple(raw["covariates"]),
            drop_sequence=list(raw["drop_sequence"]),
            groups=[MatchedGroup.from_dict(g) for g in raw["groups"]],
            unmatched=np.asarray(raw["unmatched"], dtype=np.int64),
            log=log_entries,
            stop_reason=raw["stop_reason"],
            pe_baseline=float(raw["pe_baseline"]),
        )

    def to_json(self, path=None, indent=None) -> str:
        text = json.dumps(self.to_dict(), indent=indent, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path) -> "MatchResult":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_groups_csv(self, path) -> None:
        """One row per matched unit: unit id, group id, iteration, theta bitstring."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["unit_id", "group_id", "iteration", "theta"])
            rows = [
                (int(u), g.gid, g.iteration, mask_to_bits(g.mask)) for g in self.groups for u in g.members
            ]
            writer.writerows(sorted(rows))


# --- main loop --------------------------------------------------------------------


def _evaluate_candidate(d, rows, active, j, pe_of, cfg, avail_1, avail_0):
    trial = list(active)
    trial[j] = False
    trial = tuple(trial)
    matched, _ = _matched_rows(d, rows, trial)
    m1 = int(d.z[matched].sum())
    bf = balancing_factor(avail_1, avail_0, m1, matched.size - m1)
    pe = pe_of(trial)
    return CandidateScore(j, pe, bf, match_quality(pe, bf, cfg.tradeoff_c), int(matched.size))


def flame_iv_run(train: Dataset, holdout: Dataset | None, cfg: MatchConfig | None = None) -> MatchResult:
    """Run FLAME-IV on ``train``, scoring covariate drops on ``holdout``.

    Iteration 0 matches exactly on every covariate. Each later iteration
    scores the removal of every remaining covariate, drops the best one and
    matches the still-unmatched units on what is left. Matched units are
    never revisited. When ``holdout`` is ``None`` the training set itself is
    used to compute prediction error.
    """
    cfg = cfg or MatchConfig()
    if holdout is None:
        holdout = train
    if holdout.schema != train.schema:
        raise ConfigurationError("training and holdout sets have different covariate schemas")
    p = train.p
    pe_of = _HoldoutErrors(holdout, cfg.ridge)
    active = tuple([True] * p)
    pe_baseline = pe_of(active)

    groups, matched = grouped_mr(train, np.arange(train.n), active, iteration=0)
    unmatched = np.setdiff1d(np.arange(train.n), matched, assume_unique=True)
    log_entries = [IterationLog(0, mask_to_bits(active), matched=int(matched.size))]
    drops: list[int] = []
    iteration = 0
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        while True:
            u1 = int(train.z[unmatched].sum())
            state = IterationState(u1, unmatched.size - u1, sum(active))
            decision = check_stop(state, cfg, pe_baseline)
            if decision:
                break
            iteration += 1
            candidates = [j for j in range(p) if active[j]]
            args = (train, unmatched, active)
            tail = (pe_of, cfg, state.unmatched_1, state.unmatched_0)
            if pool is None:
                scores = [_evaluate_candidate(*args, j, *tail) for j in candidates]
            else:
                scores = list(pool.map(lambda j: _evaluate_candidate(*args, j, *tail), candidates))
            entry = IterationLog(iteration, mask_to_bits(active), candidates=scores)
            log_entries.append(entry)
            chosen = best_candidate([(s.covariate, s.mq) for s in scores])
            best = next(s for s in scores if s.covariate == chosen)
            decision = check_stop(
                IterationState(state.unmatched_1, state.unmatched_0, state.active, best.pe), cfg, pe_baseline
            )
            if decision:
                break
            active = tuple(False if j == chosen else a for j, a in enumerate(active))
            drops.append(chosen)
            entry.dropped = chosen
            new_groups, newly = grouped_mr(train, unmatched, active, iteration, first_gid=len(groups))
            groups.extend(new_groups)
            entry.matched = int(newly.size)
            unmatched = np.setdiff1d(unmatched, newly, assume_unique=True)
            log.debug("iteration %d dropped %d, matched %d", iteration, chosen, newly.size)
    finally:
        if pool is not None:
            pool.shutdown()
    return MatchResult(
        names=train.schema.names,
        drop_sequence=drops,
        groups=groups,
        unmatched=np.sort(train.ids[unmatched]),
        log=log_entries,
        stop_reason=decision.reason,
        pe_baseline=pe_baseline,
    )
