import math

import numpy as np
import pytest

from flipscore import DesignData, Family, FlipPlan, fit_null
from flipscore import reference as ref
from flipscore.errors import (
    CollinearityError,
    ConfigurationError,
    DegenerateStatisticError,
)
from flipscore.score import (
    adjust,
    build_projection,
    critical_rank,
    decide,
    effective_score,
    flip_scores,
    flip_statistics,
    flip_variance_fast,
    flip_variances,
    run_univariate_test,
    standardized_statistic,
)

from conftest import make_problem

FAMILIES = ["poisson", "binomial", "gaussian", "negative_binomial"]


@pytest.mark.parametrize("family", FAMILIES)
def test_effective_score_matches_information_form(family):
    data, fit = make_problem(10, n=45, q=3, d=2, family=family)
    proj = build_projection(fit, data)
    for f in FlipPlan(n=45, g=15, seed=2).flips:
        np.testing.assert_allclose(
            effective_score(proj, fit, data, f), ref.dense_effective_score(fit, data, f), rtol=1e-9
        )


@pytest.mark.parametrize("n,q", [(10, 1), (50, 3), (120, 8)])
def test_fast_variance_matches_dense(n, q):
    data, fit = make_problem(n + q, n=n, q=q)
    proj = build_projection(fit, data)
    for f in FlipPlan(n=n, g=25, seed=q).flips:
        dense = ref.dense_flip_variance(fit, data, f)[0, 0]
        assert flip_variance_fast(proj, f) == pytest.approx(dense, rel=1e-10)


def test_batched_kernels_match_single_flip(poisson_problem):
    data, fit = poisson_problem
    proj = build_projection(fit, data)
    plan = FlipPlan(n=data.n, g=40, seed=3)
    flips = plan.flips
    r = fit.pearson(data.y)
    s = flip_scores(proj, r, flips)[:, 0]
    v = flip_variances(proj, flips)[:, 0]
    for k in (0, 1, 20, 39):
        assert s[k] == pytest.approx(effective_score(proj, fit, data, flips[k])[0], rel=1e-12)
        assert v[k] == pytest.approx(flip_variance_fast(proj, flips[k]), rel=1e-12)
    stats, (vmin, vmax) = flip_statistics(proj, r, plan)
    np.testing.assert_allclose(stats[:, 0], s / np.sqrt(v), rtol=1e-12)
    assert vmin == pytest.approx(v.min()) and vmax == pytest.approx(v.max())
    assert standardized_statistic(proj, fit, data, flips[5])[0] == pytest.approx(stats[5, 0])


def test_projection_properties(poisson_problem):
    data, fit = poisson_problem
    proj = build_projection(fit, data)
    H = ref.dense_hat(fit.w_diag, data.Z)
    np.testing.assert_allclose(proj.U @ proj.U.T, H, atol=1e-10)
    assert proj.hat_diag().sum() == pytest.approx(data.q)
    np.testing.assert_allclose(proj.a_cols, ref.dense_a(fit, data), atol=1e-10)
    assert np.max(np.abs(proj.U.T @ proj.a_cols)) < 1e-10 * np.sqrt(proj.a_norm2[0])


def test_exhaustive_flip_moments():
    data, fit = make_problem(11, n=10, q=2)
    proj = build_projection(fit, data)
    r = fit.pearson(data.y)
    s = flip_scores(proj, r, ref.enumerate_flips(10))[:, 0]
    a = proj.a_cols[:, 0]
    assert abs(s.mean()) < 1e-14 * np.abs(s).max() * 1024
    # second moment over all flips: n^{-1} sum a_i^2 r_i^2
    assert np.mean(s**2) == pytest.approx(np.sum(a**2 * r**2) / 10, rel=1e-12)


def test_identity_flip_has_largest_variance():
    data, fit = make_problem(12, n=50, q=3, family="gaussian")
    proj = build_projection(fit, data)
    var = flip_variances(proj, FlipPlan(n=50, g=1001, seed=4).flips)[:, 0]
    assert var[0] == pytest.approx(proj.a_norm2[0] / 50, rel=1e-12)
    assert np.all(var[0] - var[1:] >= -1e-12)
    assert np.mean(var[0] - var[1:] > 0) >= 0.99


def test_score_is_linear_in_residuals(poisson_problem, rng):
    data, fit = poisson_problem
    proj = build_projection(fit, data)
    flips = FlipPlan(n=data.n, g=10, seed=5).flips
    r1, r2 = rng.standard_normal(data.n), rng.standard_normal(data.n)
    np.testing.assert_allclose(
        flip_scores(proj, 2 * r1 - 3 * r2, flips),
        2 * flip_scores(proj, r1, flips) - 3 * flip_scores(proj, r2, flips),
        rtol=1e-10, atol=1e-12,
    )


class TestDecisionRule:
    def test_ties_count_toward_p_value(self):
        p, reject = decide([2.0, 1.0, 2.0, 3.0], alpha=0.5)
        assert p == 0.75 and not reject

    def test_near_ties_within_tolerance(self):
        p, _ = decide([1.0, 1.0 + 1e-14, 0.5, 0.2], alpha=0.05)
        assert p == 0.5

    def test_plus_minus_identity_never_rejects(self):
        # flips {I, -I}: |S(-I)| = |S(I)|, so p = 1
        for t0 in (0.3, -5.0, 12.0):
            p, reject = decide(adjust([t0, -t0], "two_sided"), alpha=0.05)
            assert p == 1.0 and not reject

    def test_smallest_p_value(self):
        t = np.concatenate([[10.0], np.linspace(-1, 1, 199)])
        p, reject = decide(t, alpha=0.05)
        assert p == pytest.approx(1 / 200) and reject

    def test_critical_rank_guard(self):
        assert critical_rank(0.05, 1000) == 950
        assert critical_rank(0.05, 20) == 19
        assert critical_rank(0.1, 10) == 9
        assert critical_rank(0.05, 5000) == 4750

    def test_reject_iff_p_at_most_alpha(self, rng):
        for _ in range(200):
            g = int(rng.integers(2, 60))
            t = rng.integers(0, 8, g).astype(float)
            alpha = float(rng.uniform(0.01, 0.5))
            p, reject = decide(t, alpha)
            assert reject == (p <= math.floor(alpha * g + 1e-9) / g)

    def test_alternatives(self):
        s = np.array([-1.0, 2.0, -3.0])
        np.testing.assert_array_equal(adjust(s, "greater"), s)
        np.testing.assert_array_equal(adjust(s, "less"), -s)
        np.testing.assert_array_equal(adjust(s, "two_sided"), np.abs(s))
        with pytest.raises(ConfigurationError):
            adjust(s, "both")


class TestRunUnivariate:
    def test_detects_strong_effect(self, rng):
        n = 200
        z = rng.standard_normal(n)
        x = rng.standard_normal(n)
        y = rng.poisson(np.exp(0.5 + 0.3 * z + 0.6 * x)).astype(float)
        data = DesignData(y, x, np.column_stack([np.ones(n), z]))
        res = run_univariate_test(data, Family.poisson(), FlipPlan(n=n, g=999, seed=1))
        assert res.reject and res.p_value <= 0.002
        assert res.stats_flipped.shape == (999,)
        assert res.stat_observed == res.stats_flipped[0]

    def test_effective_variant_and_one_sided(self, poisson_problem):
        data, _ = poisson_problem
        plan = FlipPlan(n=data.n, g=200, seed=2)
        hi = run_univariate_test(data, Family.poisson(), plan, "effective", "greater")
        lo = run_univariate_test(data, Family.poisson(), plan, "effective", "less")
        assert "flip_variance_min" not in hi.diagnostics
        # one-sided p-values bracket 1 up to ties
        assert hi.p_value + lo.p_value == pytest.approx(1 + 1 / 200, abs=1e-12)

    def test_zero_residuals(self):
        n = 20
        z = np.linspace(0, 1, n)
        data = DesignData(1.0 + 2.0 * z, np.sin(7 * z), np.column_stack([np.ones(n), z]))
        with pytest.raises(DegenerateStatisticError):
            run_univariate_test(data, Family.gaussian(), FlipPlan(n=n, g=20))

    def test_target_in_nuisance_span(self, rng):
        n = 30
        z = rng.standard_normal(n)
        data = DesignData(rng.poisson(2, n).astype(float), 3 * z - 1, np.column_stack([np.ones(n), z]))
        with pytest.raises(CollinearityError, match="nuisance span"):
            run_univariate_test(data, Family.poisson(), FlipPlan(n=n, g=20))

    def test_needs_single_target(self):
        data, _ = make_problem(13, d=2)
        with pytest.raises(ConfigurationError):
            run_univariate_test(data, Family.poisson(), FlipPlan(n=data.n, g=20))

    def test_plan_length_mismatch(self, poisson_problem):
        data, _ = poisson_problem
        with pytest.raises(ConfigurationError):
            run_univariate_test(data, Family.poisson(), FlipPlan(n=data.n + 1, g=20))

    def test_bad_alpha(self, poisson_problem):
        data, _ = poisson_problem
        with pytest.raises(ConfigurationError):
            run_univariate_test(data, Family.poisson(), FlipPlan(n=data.n, g=20), alpha=1.5)


def test_no_nuisance_variance_is_constant(rng):
    n = 30
    data = DesignData(rng.standard_normal(n), rng.standard_normal(n), np.empty((n, 0)))
    fit = fit_null(data, Family.gaussian())
    proj = build_projection(fit, data)
    var = flip_variances(proj, FlipPlan(n=n, g=10, seed=1).flips)
    np.testing.assert_allclose(var, proj.a_norm2[0] / n)


def test_composed_flips_equal_preflipped_residuals():
    data, fit = make_problem(14, n=40, q=3)
    proj = build_projection(fit, data)
    r = fit.pearson(data.y)
    f1, f2 = FlipPlan(n=40, g=3, seed=6).flips[1:]
    np.testing.assert_allclose(flip_scores(proj, r, (f1 * f2)[None]),
                               flip_scores(proj, f1 * r, f2[None]), rtol=1e-13)


def test_standardized_statistic_has_unit_plugin_variance():
    data, fit = make_problem(15, n=70, q=4, family="binomial")
    proj = build_projection(fit, data)
    for f in FlipPlan(n=70, g=30, seed=7).flips:
        var = flip_variance_fast(proj, f)
        # S*(F) = S(F) / sqrt(var_F): its plug-in variance is var_F / var_F
        assert ref.dense_flip_variance(fit, data, f)[0, 0] / var == pytest.approx(1.0, abs=1e-10)


def test_gaussian_fitted_mean_is_projection_of_truth(rng):
    n = 40
    Z = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
    mu = Z @ [1.0, -0.5, 2.0]
    y = mu + rng.standard_normal(n)
    data = DesignData(y, rng.standard_normal(n), Z)
    fit = fit_null(data, Family.gaussian())
    H = ref.dense_hat(fit.w_diag, Z)
    np.testing.assert_allclose(fit.mu_hat - mu, H @ (y - mu), atol=1e-10)
    np.testing.assert_allclose((np.eye(n) - H) @ (fit.mu_hat - y), fit.mu_hat - y, atol=1e-10)
