import csv
import json
import math

import numpy as np
import pytest

from flame_iv.data import CovariateSchema, make_dataset
from flame_iv.errors import ConfigurationError
from flame_iv.matcher import MatchConfig, MatchedGroup, flame_iv_run
from flame_iv.simgen import (
    DgpConfig,
    DgpParameters,
    SimTruth,
    bias_and_mad,
    discretize,
    first_stage_f,
    gen_dataset,
    gen_holdout,
    group_effect_pairs,
    run_benchmark,
    strength_sweep,
    true_group_effects,
    two_sls,
    write_metrics_json,
    write_replications_csv,
    write_strength_csv,
)


def no_covariates(z, t, y):
    n = len(z)
    return make_dataset(np.zeros((n, 0), int), z, t, y, schema=CovariateSchema((), ()))


class TestDgp:
    def test_defaults(self):
        cfg = DgpConfig()
        assert (cfg.p, cfg.n_important, cfg.p - cfg.n_important, cfg.noise_sd, cfg.n) == (10, 8, 2, 0.8, 1000)

    def test_threshold_arithmetic(self):
        cfg = DgpConfig(n=500, intercept=0.0, rho=0.0, noise_sd=1e-9, pi=2.0)
        d, truth = gen_dataset(cfg)
        assert set(d.t[d.z == 1]) == {3.0} and set(d.t[d.z == 0]) == {0.0}
        assert truth.complier.all()

    def test_discretize(self):
        np.testing.assert_array_equal(discretize(np.array([-1, 0.3, 0.31, 0.6, 0.99, 1.0, 5])), [0, 0, 1, 1, 2, 2, 3])

    def test_important_covariate_means(self):
        d, _ = gen_dataset(DgpConfig(n=2000, seed=3))
        tol = 3 * math.sqrt(0.25 / d.n)
        assert np.all(np.abs(d.x[:, :8].mean(axis=0) - 0.5) < tol)

    def test_unimportant_covariates_follow_instrument(self):
        d, _ = gen_dataset(DgpConfig(n=2000, seed=4))
        assert np.all(np.abs(d.x[d.z == 1, 8:].mean(axis=0) - 0.9) < 0.03)
        assert np.all(np.abs(d.x[d.z == 0, 8:].mean(axis=0) - 0.1) < 0.03)

    def test_balanced_arms_and_determinism(self):
        cfg = DgpConfig(n=300, seed=9)
        a, _ = gen_dataset(cfg)
        b, _ = gen_dataset(cfg)
        assert a == b and a.z.sum() == 300
        h, _ = gen_holdout(cfg)
        assert h.n == 600 and h != a
        assert gen_dataset(DgpConfig(n=300, seed=10))[0] != a

    def test_homogeneous_outcome(self):
        d, truth = gen_dataset(DgpConfig(n=200, seed=1))
        np.testing.assert_allclose(truth.effect, 10.0)
        alpha = 0.5 ** np.arange(1, 11)
        np.testing.assert_allclose(d.y, d.x @ alpha + 10 * d.t)
        assert truth.sample_late() == pytest.approx(10.0)

    def test_nonlinear_outcome(self):
        d, _ = gen_dataset(DgpConfig(n=200, seed=1, model="nonlinear"))
        x = d.x
        inter = sum(x[:, j] * x[:, g] for j in range(5) for g in range(j + 1, 5))
        np.testing.assert_allclose(d.y, x @ 0.5 ** np.arange(1, 11) + inter + 10 * d.t)

    def test_heterogeneous_effects(self):
        d, truth = gen_dataset(DgpConfig(n=200, seed=2, model="hetero-linear"))
        beta = truth.params.beta
        np.testing.assert_allclose(truth.effect, d.x @ beta)
        assert np.all(np.abs(np.abs(truth.params.alpha) - 10) < 5)

    def test_confounded_instrument(self):
        d, truth = gen_dataset(DgpConfig(n=1000, seed=5, instrument="confounded"))
        assert truth.params.confounding.shape == (2,)
        score = d.x[:, -2:] @ truth.params.confounding
        np.testing.assert_array_equal(d.z, (score >= np.median(score)).astype(int))
        assert abs(d.x[:, 8:].mean() - 0.5) < 0.05

    @pytest.mark.parametrize("model", ["linear", "nonlinear", "hetero-linear", "hetero-nonlinear"])
    def test_truth_consistent_with_realized_data(self, model):
        d, truth = gen_dataset(DgpConfig(n=300, seed=8, model=model, outcome_sd=0.5))
        rows = np.arange(d.n)
        np.testing.assert_array_equal(d.t, np.where(d.z == 1, truth.t1, truth.t0))
        np.testing.assert_array_equal(d.y, truth.y_levels[rows, d.t.astype(int)])
        assert np.all(truth.t1 >= truth.t0)

    def test_outcome_noise(self):
        d, truth = gen_dataset(DgpConfig(n=200, seed=1, outcome_sd=2.0))
        resid = d.y - d.x @ truth.params.alpha - 10 * d.t
        assert 1.5 < resid.std() < 2.5

    @pytest.mark.parametrize("kw", [{"model": "cubic"}, {"n": 0}, {"n_important": 11}, {"noise_sd": 0},
                                    {"instrument": "weird"}])
    def test_bad_config(self, kw):
        with pytest.raises(ConfigurationError):
            DgpConfig(**kw)


class TestTwoSLS:
    def test_exact_identification(self):
        z = np.tile([0, 1], 20)
        res = two_sls(no_covariates(z, z, 10.0 * z))
        assert res.estimate == pytest.approx(10.0, abs=1e-10)

    def test_wald_identity(self, rng):
        z = rng.integers(0, 2, 200)
        t = z * rng.integers(0, 4, 200) + rng.normal(size=200) * 0.1
        y = 3 * t + rng.normal(size=200)
        res = two_sls(no_covariates(z, t, y))
        wald = np.cov(y, z)[0, 1] / np.cov(t, z)[0, 1]
        assert res.estimate == pytest.approx(wald, rel=1e-10)

    def test_linear_dgp_near_ten(self):
        d, _ = gen_dataset(DgpConfig(n=1000, pi=2.0, seed=1))
        assert two_sls(d).estimate == pytest.approx(10.0, abs=0.1)


class TestFirstStage:
    def test_null_instrument(self):
        fs = [first_stage_f(gen_dataset(DgpConfig(n=500, pi=0.0, seed=s))[0]) for s in range(20)]
        assert np.median(fs) < 10

    def test_regression_oracle(self, rng):
        x = rng.integers(0, 2, size=(20, 2))
        z = rng.integers(0, 2, 20)
        t = z + x[:, 0] + rng.normal(size=20)
        d = make_dataset(x, z, t, np.zeros(20), schema=CovariateSchema(("a", "b"), (2, 2)))

        def rss(cols):
            a = np.column_stack(cols).astype(float)
            coef = np.linalg.solve(a.T @ a, a.T @ t)
            return np.sum((t - a @ coef) ** 2)

        full = rss([np.ones(20), z, x[:, 0], x[:, 1]])
        restricted = rss([np.ones(20), x[:, 0], x[:, 1]])
        assert first_stage_f(d) == pytest.approx((restricted - full) / (full / 16), rel=1e-9)


class TestMetrics:
    def test_perfect(self):
        assert bias_and_mad([10, 10, 10], 10) == (0.0, 0.0)

    def test_hand(self):
        assert bias_and_mad([9, 10, 12], 10) == (0.0, 1.0)

    def test_empty(self):
        assert all(math.isnan(v) for v in bias_and_mad([], 10))


class TestGroupTruth:
    def test_homogeneous(self):
        cfg = DgpConfig(n=300, seed=6, pi=2.0)
        d, truth = gen_dataset(cfg)
        res = flame_iv_run(d, gen_holdout(cfg)[0])
        for gt in true_group_effects(res.groups, truth, d):
            assert gt.effect is None or gt.effect == pytest.approx(10.0)

    def test_two_unit_group(self):
        beta = np.array([1.5, 2.0, 0.5])
        x = np.array([[1, 0, 1], [1, 0, 1]])
        d = make_dataset(x, [0, 1], [0, 1], [0, 0], schema=CovariateSchema(("a", "b", "c"), (2, 2, 2)))
        effect = x @ beta
        truth = SimTruth(np.array([0, 0]), np.array([1, 1]), np.zeros((2, 4)), effect,
                         DgpParameters(np.zeros(3), beta, np.zeros(3), None))
        g = MatchedGroup(0, (True,) * 3, (1, 0, 1), np.array([0, 1]), 0, 2, 1, 1)
        (gt,) = true_group_effects([g], truth, d)
        assert gt.effect == pytest.approx(2.0) and gt.compliers == 2

    def test_pairs(self):
        cfg = DgpConfig(n=1000, seed=0, pi=3.0, intercept=-1.0, model="hetero-linear")
        pairs = group_effect_pairs(cfg, MatchConfig(), replications=2)
        assert pairs and all(c >= 5 for _, c, _, _ in pairs)


class TestBenchmark:
    def test_small_run(self, tmp_path):
        cfg = DgpConfig(n=200, pi=1.5, model="nonlinear", seed=1)
        m = run_benchmark(cfg, ["flame-iv", "2sls"], replications=4)
        assert set(m.methods) == {"flame-iv", "2sls"} and m.replications == 4
        assert all(mm.failures == 0 and len(mm.estimates) == 4 for mm in m.methods.values())
        write_replications_csv(m, tmp_path / "r.csv")
        write_metrics_json(m, tmp_path / "m.json", include_runtime=False)
        rows = list(csv.DictReader(open(tmp_path / "r.csv")))
        assert len(rows) == 8
        raw = json.loads((tmp_path / "m.json").read_text())
        assert "mean_runtime" not in raw["methods"]["2sls"]

    def test_workers_do_not_change_estimates(self):
        cfg = DgpConfig(n=150, seed=2)
        one = run_benchmark(cfg, ["flame-iv", "2sls"], 3, workers=1)
        two = run_benchmark(cfg, ["flame-iv", "2sls"], 3, workers=2)
        assert one.to_dict(False) == two.to_dict(False)

    def test_sweep(self, tmp_path):
        sweep = strength_sweep(DgpConfig(n=150, seed=3), [0.5, 2.0], ["2sls"], 3)
        write_strength_csv(sweep, tmp_path / "s.csv")
        rows = list(csv.DictReader(open(tmp_path / "s.csv")))
        assert [float(r["pi"]) for r in rows] == [0.5, 2.0]
        assert float(rows[1]["median_first_stage_f"]) > float(rows[0]["median_first_stage_f"])

    def test_unknown_method(self):
        with pytest.raises(ConfigurationError):
            run_benchmark(DgpConfig(n=50), ["lasso"], 1)
