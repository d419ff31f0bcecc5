"""Slow reference implementations used to check the fast paths.

Everything here is deliberately naive: dictionaries instead of encodings,
full enumeration instead of greedy search.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .data import Dataset


def weighted_hamming(xi, xk, w) -> float:
    xi, xk, w = list(xi), list(xk), list(w)
    if not len(xi) == len(xk) == len(w):
        raise ValueError("vectors and weights must have equal length")
    if any(wj < 0 for wj in w):
        raise ValueError("weights must be nonnegative")
    return float(sum(wj for a, b, wj in zip(xi, xk, w) if a != b))


def brute_force_match(d: Dataset, mask, rows=None) -> list[list[int]]:
    """Groups (as sorted lists of unit ids) of units sharing masked covariates, both arms present."""
    rows = range(d.n) if rows is None else rows
    active = [j for j, on in enumerate(mask) if on]
    buckets: dict[tuple, list[int]] = {}
    for r in rows:
        key = tuple(int(d.x[r, j]) for j in active)
        buckets.setdefault(key, []).append(int(r))
    groups = []
    for members in buckets.values():
        arms = {int(d.z[r]) for r in members}
        if arms == {0, 1}:
            groups.append(sorted(int(d.ids[r]) for r in members))
    return sorted(groups)


@dataclass(frozen=True)
class AmeIvSolution:
    theta: tuple[int, ...] | None  # None when no opposite-arm unit exists
    weight: float
    group: list[int]  # row positions agreeing with unit i on theta, unit i included


def exhaustive_ame_iv(i: int, d: Dataset, w) -> AmeIvSolution:
    """Best covariate subset for unit ``i`` by enumerating all 2**p masks.

    Maximises ``theta @ w`` subject to some opposite-arm unit agreeing with
    ``i`` on the covariates in ``theta``. Ties go to the lexicographically
    largest mask.
    """
    p = d.p
    if p > 20:
        raise ValueError("exhaustive search is limited to p <= 20")
    w = np.asarray(w, dtype=np.float64)
    others = [k for k in range(d.n) if d.z[k] != d.z[i]]
    if not others:
        return AmeIvSolution(None, 0.0, [i])
    xi = d.x[i]
    best, best_w = None, -np.inf
    for theta in itertools.product((1, 0), repeat=p):  # lexicographically descending
        on = np.asarray(theta, dtype=bool)
        feasible = any(np.array_equal(d.x[k][on], xi[on]) for k in others)
        if not feasible:
            continue
        value = float(np.dot(theta, w))
        if value > best_w:
            best, best_w = theta, value
    on = np.asarray(best, dtype=bool)
    group = [k for k in range(d.n) if np.array_equal(d.x[k][on], xi[on])]
    return AmeIvSolution(best, best_w, group)


def min_opposite_distance(i: int, d: Dataset, w) -> float:
    return min(weighted_hamming(d.x[i], d.x[k], w) for k in range(d.n) if d.z[k] != d.z[i])
