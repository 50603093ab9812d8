import math

import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flipscore import FlipPlan
from flipscore import reference as ref
from flipscore.errors import FitError
from flipscore.score import build_projection, decide, flip_scores, flip_statistics, flip_variances

from conftest import make_problem

seeds = st.integers(0, 2**31 - 1)


def _fitted(seed, **kw):
    """Random problem; separated or boundary fits are discarded."""
    try:
        return make_problem(seed, **kw)
    except FitError:
        assume(False)


@given(t=arrays(float, st.integers(2, 80), elements=st.integers(-5, 5).map(float)),
       alpha=st.floats(0.001, 0.999))
def test_decision_matches_p_value(t, alpha):
    p, reject = decide(t, alpha)
    g = t.size
    assert 1 / g <= p <= 1
    assert reject == (p <= math.floor(alpha * g + 1e-9) / g)


@given(C=arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(1, 6)).map(lambda s: (s[0], s[0])),
                elements=st.integers(-10**6, 10**6)))
def test_flip_sandwich_sum_is_diagonal(C):
    n = C.shape[0]
    np.testing.assert_array_equal(ref.flip_sandwich_sum(C), 2**n * np.diag(np.diag(C)))


@settings(max_examples=30, deadline=None)
@given(seed=seeds, n=st.integers(8, 60), q=st.integers(0, 4),
       family=st.sampled_from(["poisson", "binomial", "gaussian"]))
def test_flip_variance_bounds_and_sign_symmetry(seed, n, q, family):
    data, fit = _fitted(seed, n=n, q=q, family=family)
    proj = build_projection(fit, data)
    flips = FlipPlan(n=n, g=20, seed=seed).flips
    var = flip_variances(proj, np.vstack([flips, -flips]))[:, 0]
    top = proj.a_norm2[0] / n
    assert np.all(var <= top * (1 + 1e-12))
    assert np.all(var >= 0)
    np.testing.assert_allclose(var[:20], var[20:], rtol=1e-10, atol=1e-15 * top)
    r = fit.pearson(data.y)
    s = flip_scores(proj, r, np.vstack([flips, -flips]))[:, 0]
    np.testing.assert_allclose(s[:20], -s[20:], rtol=1e-12, atol=1e-14 * np.abs(s).max())


@settings(max_examples=25, deadline=None)
@given(seed=seeds, c=st.floats(1e-3, 1e3), family=st.sampled_from(["poisson", "binomial", "gaussian"]))
def test_variance_rescale_scales_statistics(seed, c, family):
    data, fit = _fitted(seed, n=30, q=2, family=family)
    plan = FlipPlan(n=30, g=50, seed=seed)
    base, _ = flip_statistics(build_projection(fit, data), fit.pearson(data.y), plan)
    fc = fit.rescaled(c)
    scaled, _ = flip_statistics(build_projection(fc, data), fc.pearson(data.y), plan)
    np.testing.assert_allclose(scaled * math.sqrt(c), base, rtol=1e-9, atol=1e-12)
    assert decide(np.abs(scaled[:, 0]), 0.05) == decide(np.abs(base[:, 0]), 0.05)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), n=st.integers(1, 700), j=st.integers(0, 49))
def test_flip_random_access(seed, n, j):
    plan = FlipPlan(n=n, g=50, seed=seed)
    np.testing.assert_array_equal(plan.flip(j), plan.flips[j])
