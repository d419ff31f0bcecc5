"""Randomized cross-checks of the fast matching kernel against the slow oracles."""

from __future__ import annotations

import numpy as np

from .data import CovariateSchema, Dataset, make_dataset
from .matcher import grouped_mr
from .oracle import exhaustive_ame_iv, min_opposite_distance, weighted_hamming


def random_instance(rng: np.random.Generator, max_p: int = 10, max_n: int = 500, max_card: int = 4) -> Dataset:
    p = int(rng.integers(1, max_p + 1))
    n = int(rng.integers(1, max_n + 1))
    card = rng.integers(2, max_card + 1, size=p)
    x = np.column_stack([rng.integers(0, k, size=n) for k in card])
    z = rng.integers(0, 2, size=n)
    zeros = np.zeros(n)
    schema = CovariateSchema(tuple(f"x{j}" for j in range(p)), tuple(int(k) for k in card))
    return make_dataset(x, z, zeros, zeros, schema=schema)


def random_mask(rng: np.random.Generator, p: int) -> np.ndarray:
    return rng.random(p) < rng.uniform(0.2, 1.0)


def kernel_groups(d: Dataset, mask) -> list[list[int]]:
    groups, _ = grouped_mr(d, np.arange(d.n), mask)
    return sorted(sorted(int(u) for u in g.members) for g in groups)


def kernel_agreement(rng: np.random.Generator, instances: int, **sizes) -> dict:
    """Compare the bit-encoded grouping with dictionary grouping on random data."""
    from .oracle import brute_force_match

    failures = []
    for k in range(instances):
        d = random_instance(rng, **sizes)
        mask = random_mask(rng, d.p)
        if kernel_groups(d, mask) != brute_force_match(d, mask):
            failures.append(k)
    return {"instances": instances, "failures": len(failures), "failed_instances": failures}


def min_distance_violations(d: Dataset, i: int, w) -> list[str]:
    """Problems with the exhaustive solution for unit ``i``; empty when the minimum-distance property holds."""
    sol = exhaustive_ame_iv(i, d, w)
    if sol.theta is None:
        return []
    problems = []
    best = min_opposite_distance(i, d, w)
    partners = [k for k in sol.group if d.z[k] != d.z[i]]
    if not partners:
        problems.append("no opposite-arm partner in the matched group")
    for k in partners:
        dist = weighted_hamming(d.x[i], d.x[k], w)
        if not np.isclose(dist, best, rtol=0, atol=1e-9):
            problems.append(f"partner {k} at distance {dist}, minimum is {best}")
    if best == 0 and not all(sol.theta):
        problems.append("exact twin present but theta is not all ones")
    return problems


def min_distance_suite(rng: np.random.Generator, instances: int, max_p: int = 8, max_n: int = 100) -> dict:
    """Minimum-distance property of exhaustive AME-IV solutions on random small instances.

    Half of the instances plant an opposite-arm exact twin of the probed unit.
    """
    failures = []
    twins = 0
    for k in range(instances):
        p = int(rng.integers(1, max_p + 1))
        n = int(rng.integers(2, max_n + 1))
        x = rng.integers(0, 2, size=(n, p))
        z = rng.integers(0, 2, size=n)
        i = int(rng.integers(n))
        if k % 2 == 0:
            j = int(rng.integers(n - 1))
            j += j >= i
            x[j] = x[i]
            z[j] = 1 - z[i]
            twins += 1
        zeros = np.zeros(n)
        d = make_dataset(x, z, zeros, zeros, schema=CovariateSchema(tuple(f"x{c}" for c in range(p)), (2,) * p))
        w = rng.uniform(0.0, 1.0, size=p)
        problems = min_distance_violations(d, i, w)
        if problems:
            failures.append({"instance": k, "problems": problems})
    return {"instances": instances, "twins": twins, "failures": len(failures), "details": failures}
