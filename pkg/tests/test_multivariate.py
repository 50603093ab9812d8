import numpy as np
import pytest

from flipscore import DesignData, Family, FlipPlan, fit_null
from flipscore import reference as ref
from flipscore.errors import ConfigurationError, DegenerateStatisticError
from flipscore.multivariate import (
    CombineMatrix,
    combined_statistic,
    combined_statistics,
    flip_covariance,
    flip_covariances,
    multivariate_test_from_fit,
    run_multivariate_test,
    standardized_score_vector,
)
from flipscore.score import build_projection, run_univariate_test

from conftest import make_problem


@pytest.mark.parametrize("q", [0, 1, 4])
def test_flip_covariances_match_dense(q):
    data, fit = make_problem(20 + q, n=60, q=q, d=3)
    proj = build_projection(fit, data)
    flips = FlipPlan(n=60, g=30, seed=q).flips
    fast = flip_covariances(proj, flips)
    for k in range(0, 30, 4):
        np.testing.assert_allclose(fast[k], ref.dense_flip_variance(fit, data, flips[k]), rtol=1e-10,
                                   atol=1e-14)


def test_standardized_vector_has_identity_plugin_covariance():
    data, fit = make_problem(21, n=80, q=3, d=3)
    proj = build_projection(fit, data)
    for f in FlipPlan(n=80, g=5, seed=1).flips:
        V = flip_covariance(proj, f)
        lam, Q = np.linalg.eigh(V)
        root = (Q / np.sqrt(lam)) @ Q.T
        np.testing.assert_allclose(root @ V @ root, np.eye(3), atol=1e-10)
        s = standardized_score_vector(proj, fit, data, f)
        np.testing.assert_allclose(s, root @ ref.dense_effective_score(fit, data, f), rtol=1e-8)


def test_batched_statistics_match_single_flip():
    data, fit = make_problem(22, n=50, q=2, d=2)
    proj = build_projection(fit, data)
    plan = FlipPlan(n=50, g=12, seed=2)
    M = CombineMatrix(np.array([[2.0, 0.5], [0.5, 1.0]]))
    T = combined_statistics(proj, fit.pearson(data.y), plan, M)
    for k, f in enumerate(plan.flips):
        s = standardized_score_vector(proj, fit, data, f)
        assert T[k] == pytest.approx(combined_statistic(s, M), rel=1e-10)


def test_identity_combination_invariant_to_target_reparametrization(rng):
    data, fit = make_problem(23, n=70, q=3, d=3)
    A = rng.standard_normal((3, 3)) + 2 * np.eye(3)
    data2 = DesignData(data.y, data.X @ A, data.Z)
    plan = FlipPlan(n=70, g=50, seed=3)
    t1 = combined_statistics(build_projection(fit, data), fit.pearson(data.y), plan, CombineMatrix.identity(3))
    fit2 = fit_null(data2, Family.poisson())
    t2 = combined_statistics(build_projection(fit2, data2), fit2.pearson(data2.y), plan,
                             CombineMatrix.identity(3))
    np.testing.assert_allclose(t1, t2, rtol=1e-8)


def test_d1_reduces_to_two_sided_univariate():
    data, fit = make_problem(24, n=60, q=3)
    plan = FlipPlan(n=60, g=300, seed=4)
    uni = run_univariate_test(data, Family.poisson(), plan)
    multi = multivariate_test_from_fit(fit, build_projection(fit, data), data, plan)
    np.testing.assert_allclose(multi.stats_flipped, uni.stats_flipped**2, rtol=1e-12)
    assert multi.p_value == uni.p_value
    assert run_multivariate_test(data, Family.poisson(), plan).p_value == uni.p_value


def test_inverse_score_covariance_is_identity():
    data, fit = make_problem(25, n=60, q=3, d=3)
    M = CombineMatrix.inverse_score_covariance(build_projection(fit, data))
    np.testing.assert_allclose(M.M, np.eye(3), atol=1e-10)
    assert M.kind == "inverse_score_covariance"


class TestCombineMatrix:
    def test_rejects_bad_matrices(self):
        with pytest.raises(ConfigurationError, match="symmetric"):
            CombineMatrix([[1.0, 2.0], [0.0, 1.0]])
        with pytest.raises(ConfigurationError, match="semi-definite"):
            CombineMatrix([[1.0, 0.0], [0.0, -1.0]])
        with pytest.raises(ConfigurationError, match="non-zero"):
            CombineMatrix(np.zeros((2, 2)))
        with pytest.raises(ConfigurationError, match="square"):
            CombineMatrix(np.ones((2, 3)))

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigurationError, match="dimension"):
            combined_statistic(np.ones(3), np.eye(2))
        data, fit = make_problem(26, n=40, q=2, d=2)
        with pytest.raises(ConfigurationError):
            multivariate_test_from_fit(fit, build_projection(fit, data), data,
                                       FlipPlan(n=40, g=10), np.eye(3))

    def test_string_and_array_inputs(self):
        data, fit = make_problem(27, n=40, q=2, d=2)
        proj = build_projection(fit, data)
        plan = FlipPlan(n=40, g=50, seed=1)
        a = multivariate_test_from_fit(fit, proj, data, plan, "identity")
        b = multivariate_test_from_fit(fit, proj, data, plan, np.eye(2))
        np.testing.assert_array_equal(a.stats_flipped, b.stats_flipped)
        with pytest.raises(ConfigurationError):
            multivariate_test_from_fit(fit, proj, data, plan, "diagonal")


def test_duplicate_targets_are_degenerate(rng):
    n = 40
    z = rng.standard_normal(n)
    x = rng.standard_normal(n)
    data = DesignData(rng.poisson(2, n).astype(float), np.column_stack([x, x]),
                      np.column_stack([np.ones(n), z]))
    with pytest.raises(DegenerateStatisticError):
        run_multivariate_test(data, Family.poisson(), FlipPlan(n=n, g=20))


def test_null_rejection_rate_d3():
    # Poisson model, three null targets, n = 100
    reps, n, g, alpha = 3000, 100, 200, 0.05
    rejections = 0
    for rep in range(reps):
        rng = np.random.default_rng([7, rep])
        Z = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
        X = rng.standard_normal((n, 3)) + 0.3 * Z[:, 1:2]
        y = rng.poisson(np.exp(0.5 + 0.3 * Z[:, 1])).astype(float)
        res = run_multivariate_test(DesignData(y, X, Z), Family.poisson(), FlipPlan(n=n, g=g, seed=rep), alpha=alpha)
        rejections += res.reject
    assert abs(rejections / reps - alpha) <= 0.015


def test_negated_flip_gives_same_combined_statistic():
    data, fit = make_problem(28, n=50, q=3, d=3)
    proj = build_projection(fit, data)
    flips = FlipPlan(n=50, g=20, seed=5).flips
    r = fit.pearson(data.y)
    M = CombineMatrix.identity(3)
    a = combined_statistics(proj, r, FlipPlan.from_array(flips), M)
    b = combined_statistics(proj, r, FlipPlan.from_array(-flips), M)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_orthogonal_targets_sum_univariate_squares(rng):
    # no nuisance, unit weights, orthogonal target columns: V_F is diagonal
    n = 64
    Q, _ = np.linalg.qr(rng.standard_normal((n, 2)))
    data = DesignData(rng.standard_normal(n), Q * np.sqrt(n), np.empty((n, 0)))
    fit = fit_null(data, Family.gaussian())
    proj = build_projection(fit, data)
    plan = FlipPlan(n=n, g=40, seed=2)
    T = combined_statistics(proj, fit.pearson(data.y), plan, CombineMatrix.identity(2))
    uni = sum(
        run_univariate_test(DesignData(data.y, data.X[:, j], data.Z), Family.gaussian(), plan).stats_flipped ** 2
        for j in range(2)
    )
    np.testing.assert_allclose(T, uni, rtol=1e-10)
