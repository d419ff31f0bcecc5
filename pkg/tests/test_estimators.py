import math
from fractions import Fraction as F

import numpy as np
import pytest

from flame_iv.data import make_dataset
from flame_iv.errors import WeakInstrumentError
from flame_iv.estimators import (
    EXCLUDE_NO_TREATED_OR_CONTROL,
    EXCLUDE_NO_UPTAKE,
    GroupEffect,
    confidence_interval,
    effects_for_groups,
    estimate_late,
    group_effect,
    group_itt,
    late_group,
    late_pooled,
    per_group_table,
    variance_report,
    write_group_csv,
)
from flame_iv.matcher import MatchedGroup


def fixed_effect(gid, n, itt_y, itt_t):
    return GroupEffect(gid, itt_y, itt_t, n, n // 2, n - n // 2, None, None, None, None)


def exact_sigma2(groups):
    """Delta-method variance in rational arithmetic, straight from the per-group formulas.

    ``groups`` is a list of (z, y, t) tuples of integer sequences.
    """
    n = sum(len(z) for z, _, _ in groups)
    itt_y = itt_t = var_y = var_t = cov = F(0)
    for z, y, t in groups:
        w = F(len(z), n)
        y1 = [F(v) for v, zz in zip(y, z) if zz == 1]
        y0 = [F(v) for v, zz in zip(y, z) if zz == 0]
        t1 = [F(v) for v, zz in zip(t, z) if zz == 1]
        t0 = [F(v) for v, zz in zip(t, z) if zz == 0]
        n1, n0 = len(y1), len(y0)
        my1, my0, mt1, mt0 = sum(y1) / n1, sum(y0) / n0, sum(t1) / n1, sum(t0) / n0
        itt_y += w * (my1 - my0)
        itt_t += w * (mt1 - mt0)
        s1 = sum((v - my1) ** 2 for v in y1) / (n1 - 1)
        s0 = sum((v - my0) ** 2 for v in y0) / (n0 - 1)
        r1 = sum((v - mt1) ** 2 for v in t1) / (n1 - 1)
        c1 = sum((a - my1) * (b - mt1) for a, b in zip(y1, t1)) / (n1 * (n1 - 1))
        var_y += w * w * (s1 / n1 + s0 / n0)
        var_t += w * w * r1 / n1
        cov += w * w * c1
    return var_y / itt_t**2 + itt_y**2 * var_t / itt_t**4 - 2 * itt_y * cov / itt_t**3


def build(groups):
    """Dataset plus one MatchedGroup per (z, y, t) block."""
    z = np.concatenate([g[0] for g in groups])
    y = np.concatenate([g[1] for g in groups]).astype(float)
    t = np.concatenate([g[2] for g in groups]).astype(float)
    d = make_dataset(np.zeros((len(z), 1), int), z, t, y)
    out, start = [], 0
    for k, (gz, _, _) in enumerate(groups):
        ids = np.arange(start, start + len(gz))
        n1 = int(np.sum(gz))
        out.append(MatchedGroup(k, (False,), (), ids, 0, len(gz), n1, len(gz) - n1))
        start += len(gz)
    return d, out


EIGHT = ([1, 1, 1, 1, 0, 0, 0, 0], [4, 6, 5, 5, 1, 1, 2, 0], [1, 1, 0, 1, 0, 0, 0, 0])


class TestITT:
    def test_identity(self):
        z = [1, 1, 0, 0, 1]
        assert group_itt(z, z, z) == (1.0, 1.0)

    def test_hand_values(self):
        assert group_itt([3, 5, 1, 1], [1, 0, 0, 0], [1, 1, 0, 0]) == (3.0, 0.5)

    def test_constant_outcome(self):
        assert group_itt([7, 7, 7], [1, 0, 0], [1, 0, 0])[0] == 0.0

    def test_single_arm_rejected(self):
        with pytest.raises(ValueError):
            group_itt([1, 2], [0, 1], [1, 1])


class TestPooled:
    def test_full_compliance(self):
        e = group_effect(0, [5, 7, 1, 2], [1, 1, 0, 0], [1, 1, 0, 0])
        assert late_pooled([e]) == e.itt_y == 4.5

    def test_two_groups(self):
        effects = [fixed_effect(0, 4, 3.0, 0.5), fixed_effect(1, 4, 1.0, 1.0)]
        assert late_pooled(effects) == pytest.approx(16 / 6, abs=1e-12)

    def test_zero_denominator(self):
        with pytest.raises(WeakInstrumentError):
            late_pooled([fixed_effect(0, 4, 1.0, 0.0)])


class TestPerGroup:
    def test_ratio(self):
        assert late_group(fixed_effect(0, 4, 3.0, 0.5)) == 6.0

    def test_full_compliance(self):
        e = group_effect(0, [9, 4, 1], [1, 0, 0], [1, 0, 0])
        assert late_group(e) == e.itt_y

    def test_no_uptake_excluded(self):
        assert late_group(fixed_effect(0, 4, 1.0, 0.0)) is None
        d, groups = build([([1, 1, 0, 0], [1, 2, 3, 4], [0, 0, 0, 0]), ([1, 0], [5, 1], [1, 0])])
        rows = per_group_table(groups, d)
        assert rows[0].late is None and rows[0].reason == EXCLUDE_NO_UPTAKE
        assert rows[1].late == 4.0 and rows[1].reason is None

    def test_csv(self, tmp_path):
        d, groups = build([([1, 1, 0, 0], [1, 2, 3, 4], [0, 0, 0, 0]), ([1, 0], [5, 1], [1, 0])])
        write_group_csv(per_group_table(groups, d), tmp_path / "g.csv")
        lines = (tmp_path / "g.csv").read_text().splitlines()
        assert lines[0].startswith("group_id,iteration,n,")
        assert lines[1].endswith(",," + EXCLUDE_NO_UPTAKE)


class TestVariance:
    def test_eight_unit_fixture(self):
        e = group_effect(0, EIGHT[1], EIGHT[2], EIGHT[0])
        # z=1: y=(4,6,5,5) mean 5, t=(1,1,0,1) mean 3/4; z=0: y=(1,1,2,0) mean 1
        assert e.s2_1 == pytest.approx(2 / 3, abs=1e-12)
        assert e.s2_0 == pytest.approx(2 / 3, abs=1e-12)
        assert e.r2_1 == pytest.approx(1 / 4, abs=1e-12)
        assert e.cov_1 == pytest.approx(0.0, abs=1e-12)
        rep = variance_report([e])
        assert rep.itt_y == 4.0 and rep.itt_t == 0.75
        assert rep.var_itt_y == pytest.approx(1 / 3, abs=1e-12)
        assert rep.var_itt_t == pytest.approx(1 / 16, abs=1e-12)
        # 16/27 + 256/81
        assert rep.sigma2 == pytest.approx(304 / 81, abs=1e-12)
        assert float(exact_sigma2([EIGHT])) == pytest.approx(304 / 81, abs=1e-12)

    def test_nonzero_covariance_against_exact(self):
        groups = [
            ([1, 1, 1, 1, 0, 0, 0], [9, 2, 7, 3, 1, 0, 2], [2, 0, 1, 0, 0, 0, 0]),
            ([1, 1, 1, 0, 0], [4, 8, 1, 3, 2], [1, 3, 0, 0, 1]),
        ]
        d, gs = build(groups)
        rep = variance_report(effects_for_groups(gs, d))
        assert rep.cov != 0
        assert rep.sigma2 == pytest.approx(float(exact_sigma2(groups)), abs=1e-12)

    def test_full_compliance_reduces_to_outcome_term(self):
        groups = [([1, 1, 1, 0, 0], [4, 6, 8, 1, 3], [1, 1, 1, 0, 0]), ([1, 1, 0, 0], [2, 5, 0, 1], [1, 1, 0, 0])]
        d, gs = build(groups)
        rep = variance_report(effects_for_groups(gs, d))
        assert rep.var_itt_t == 0 and rep.cov == 0
        assert rep.sigma2 == pytest.approx(rep.var_itt_y / rep.itt_t**2, abs=1e-15)

    def test_small_arm_groups_skip_variance(self):
        groups = [EIGHT, ([1, 0, 0], [10, 1, 3], [1, 0, 0])]
        d, gs = build(groups)
        est = estimate_late(gs, d)
        assert est.variance_excluded == [1]
        assert est.n_used == 11 and est.groups_used == 2
        e = effects_for_groups(gs, d)
        w = 8 / 11
        expected_y = w * w * (e[0].s2_1 / 4 + e[0].s2_0 / 4)
        assert est.variance.var_itt_y == pytest.approx(expected_y, abs=1e-12)

    def test_eight_unit_estimate(self):
        d, gs = build([EIGHT])
        est = estimate_late(gs, d)
        assert est.estimate == pytest.approx(16 / 3, abs=1e-12)
        assert est.sigma2 == pytest.approx(304 / 81, abs=1e-12)


class TestCI:
    def test_degenerate(self):
        assert confidence_interval(3.0, 0.0) == (3.0, 3.0)

    def test_hand_values(self):
        lo, hi = confidence_interval(10.0, 0.22**2, 0.05)
        assert lo == pytest.approx(9.5688, abs=1e-4)
        assert hi == pytest.approx(10.4312, abs=1e-4)

    def test_quantile_accuracy(self):
        lo, hi = confidence_interval(0.0, 1.0, 0.05)
        assert hi == pytest.approx(1.959963984540054, abs=1e-12)

    def test_nested_levels(self):
        wide = confidence_interval(1.0, 0.5, 0.05)
        narrow = confidence_interval(1.0, 0.5, 0.10)
        assert wide[0] < narrow[0] < narrow[1] < wide[1]

    @pytest.mark.parametrize("alpha,sigma2", [(0, 1.0), (1, 1.0), (0.05, -1.0)])
    def test_bad_inputs(self, alpha, sigma2):
        with pytest.raises(ValueError):
            confidence_interval(0.0, sigma2, alpha)


class TestEstimate:
    def test_strict_excludes_all_treated_or_untreated(self):
        groups = [EIGHT, ([1, 1, 0, 0], [3, 4, 1, 2], [1, 1, 1, 1])]
        d, gs = build(groups)
        with pytest.raises(WeakInstrumentError):
            estimate_late(gs[1:], d)
        est = estimate_late(gs, d, strict=True)
        assert est.excluded == [(1, EXCLUDE_NO_TREATED_OR_CONTROL)]
        assert est.groups_used == 1
        loose = estimate_late(gs, d)
        assert loose.groups_used == 2 and loose.excluded == []

    def test_no_groups(self):
        d, _ = build([EIGHT])
        with pytest.raises(WeakInstrumentError):
            estimate_late([], d)

    def test_report(self):
        d, gs = build([EIGHT])
        est = estimate_late(gs, d, alpha=0.1)
        assert "90% CI" in est.table()
        raw = est.to_dict()
        assert raw["alpha"] == 0.1 and raw["ci"] == list(est.ci)
        assert est.se == pytest.approx(math.sqrt(304 / 81))


def random_groups(r):
    groups = []
    for _ in range(int(r.integers(1, 6))):
        n1, n0 = int(r.integers(2, 8)), int(r.integers(2, 8))
        z = np.r_[np.ones(n1, int), np.zeros(n0, int)]
        t = np.r_[r.integers(0, 4, n1), np.zeros(n0, int)]
        t[0] = 3  # keep uptake positive
        y = r.normal(size=n1 + n0) * 5 + 2 * t
        groups.append((z, y, t))
    return groups


def estimate_blocks(groups):
    d, gs = build(groups)
    return estimate_late(gs, d)


def test_invariants_on_random_inputs(rng):
    for _ in range(1000):
        groups = random_groups(rng)
        d, gs = build(groups)
        base = estimate_late(gs, d)
        a = float(rng.uniform(0.1, 10)) * rng.choice([-1, 1])
        b = float(rng.uniform(0.1, 10))
        scaled_y = estimate_blocks([(z, a * y, t) for z, y, t in groups])
        assert scaled_y.estimate == pytest.approx(a * base.estimate, rel=1e-9, abs=1e-9)
        assert scaled_y.sigma2 == pytest.approx(a * a * base.sigma2, rel=1e-9)
        scaled_t = estimate_blocks([(z, y, b * t) for z, y, t in groups])
        assert scaled_t.estimate == pytest.approx(base.estimate / b, rel=1e-9, abs=1e-9)
        assert scaled_t.sigma2 == pytest.approx(base.sigma2 / b**2, rel=1e-9)
        flipped_d, flipped_g = build([(1 - z, y, t) for z, y, t in groups])
        flipped = estimate_late(flipped_g, flipped_d)
        assert flipped.estimate == pytest.approx(base.estimate, rel=1e-9, abs=1e-9)
        for e, f in zip(effects_for_groups(gs, d), effects_for_groups(flipped_g, flipped_d)):
            assert f.itt_y == pytest.approx(-e.itt_y) and f.itt_t == pytest.approx(-e.itt_t)
        # group order does not matter
        shuffled = estimate_late(gs[::-1], d)
        assert shuffled.estimate == base.estimate and shuffled.sigma2 == base.sigma2
