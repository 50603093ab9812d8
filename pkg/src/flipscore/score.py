"""Effective and standardized sign-flip score statistics.

The nuisance projection ``H = W^{1/2} Z (Z' W Z)^{-1} Z' W^{1/2}`` is only
ever represented by the thin factor ``U`` with ``H = U U'``, so every
per-flip quantity costs ``O(n q)`` or ``O(n d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import (
    CollinearityError,
    ConfigurationError,
    DegenerateStatisticError,
    RankDeficiencyError,
)
from .glm import fit_null

VARIANTS = ("effective", "standardized")
ALTERNATIVES = ("greater", "less", "two_sided")

#: Relative floor for flip variances before they count as degenerate.
DEGENERATE_VARIANCE = 1e-12
#: Relative tolerance under which a flipped statistic ties the observed one.
TIE_TOL = 1e-12


@dataclass(frozen=True)
class Projection:
    """Thin factor of the nuisance hat matrix plus the projected targets.

    Attributes
    ----------
    U : (n, q) array
        Orthonormal basis of the column space of ``W^{1/2} Z``.
    a_cols : (n, d) array
        ``a_j = (I - H) W^{1/2} X_j``.
    a_norm2 : (d,) array
        Squared norms of the ``a_j``.
    """

    U: np.ndarray
    a_cols: np.ndarray
    a_norm2: np.ndarray

    @property
    def n(self):
        return self.U.shape[0]

    @property
    def q(self):
        return self.U.shape[1]

    @property
    def d(self):
        return self.a_cols.shape[1]

    @property
    def C_stacks(self):
        """``(d, n, q)`` array holding ``C_j = diag(a_j) U``."""
        return self.C_flat.reshape(self.n, self.d, self.q).transpose(1, 0, 2)

    @cached_property
    def C_flat(self):
        """``[C_1, ..., C_d]`` side by side, ``(n, d q)``; computed once."""
        C = (self.a_cols[:, :, None] * self.U[:, None, :]).reshape(self.n, self.d * self.q)
        C.setflags(write=False)
        return C

    def hat_diag(self):
        """Leverages ``h_ii``."""
        return np.einsum("ij,ij->i", self.U, self.U)


def build_projection(fit, data):
    """Factor ``W^{1/2} Z`` by a thin SVD and project the targets.

    Raises
    ------
    RankDeficiencyError
        If ``W^{1/2} Z`` has numerical rank below ``q``.
    CollinearityError
        If some ``||a_j||^2`` is below ``1e-12 ||W^{1/2} X_j||^2``.
    """
    sw = np.sqrt(fit.w_diag)
    wz = data.Z * sw[:, None]
    n, q = wz.shape
    if q:
        u, s, _ = np.linalg.svd(wz, full_matrices=False)
        tol = s.max() * max(n, q) * np.finfo(float).eps
        if np.sum(s > tol) < q:
            raise RankDeficiencyError("W^1/2 Z is numerically rank deficient")
        U = u[:, :q]
    else:
        U = np.empty((n, 0))
    wx = data.X * sw[:, None]
    a = wx - U @ (U.T @ wx)
    a_norm2 = np.einsum("ij,ij->j", a, a)
    ref = np.einsum("ij,ij->j", wx, wx)
    bad = np.flatnonzero(a_norm2 <= 1e-12 * ref)
    if bad.size:
        err = CollinearityError(
            f"target column(s) {bad.tolist()} lie in the nuisance span; "
            "drop them or remove the collinear nuisance columns"
        )
        err.columns = bad.tolist()
        raise err
    for arr in (U, a, a_norm2):
        arr.setflags(write=False)
    return Projection(U=U, a_cols=a, a_norm2=a_norm2)


def score_contributions(fit, data):
    """Per-observation raw target scores ``(y_i - mu_i) X_ij d_i / v_i``."""
    scale = (data.y - fit.mu_hat) * fit.d_diag / fit.v_diag
    return data.X * scale[:, None]


def effective_score(proj, fit, data, flip):
    """``n^{-1/2} a_j' (f * r)`` with ``r = V^{-1/2}(y - mu_hat)``."""
    r = fit.pearson(data.y)
    flip = np.asarray(flip, dtype=float)
    return proj.a_cols.T @ (flip * r) / math.sqrt(proj.n)


def flip_variance_fast(proj, flip, j=0):
    """Plug-in variance of the flipped effective score for target ``j``.

    Equals ``n^{-1} (a'a - ||C' f||^2)`` with ``C = diag(a) U``, i.e. the
    quadratic form ``n^{-1} a' F (I - H) F a`` without forming ``H``.
    """
    flip = np.asarray(flip, dtype=float)
    q = proj.q
    top = float(proj.a_norm2[j])
    if q:
        cf = flip @ proj.C_flat[:, j * q : (j + 1) * q]
        var = (top - float(cf @ cf)) / proj.n
    else:
        var = top / proj.n
    if var <= DEGENERATE_VARIANCE * top / proj.n:
        _check_variance(np.asarray([var]), top / proj.n)
    return var


def _check_variance(var, ref):
    if np.any(var <= DEGENERATE_VARIANCE * ref):
        raise DegenerateStatisticError(
            "a sign flip annihilates the spread of the statistic "
            f"(flip variance {float(np.min(var)):.3g} vs scale {float(np.max(ref)):.3g})"
        )


def standardized_statistic(proj, fit, data, flip):
    """Effective score divided by the square root of its flip variance."""
    s = effective_score(proj, fit, data, flip)
    var = np.array([flip_variance_fast(proj, flip, j) for j in range(proj.d)])
    return s / np.sqrt(var)


# -- batched kernels -------------------------------------------------------


def flip_scores(proj, r, flips):
    """Effective scores for a block of flips: ``(k, d)``."""
    return flips @ (proj.a_cols * r[:, None]) / math.sqrt(proj.n)


def flip_variances(proj, flips):
    """Plug-in flip variances for a block of flips: ``(k, d)``."""
    n, q, d = proj.n, proj.q, proj.d
    if q == 0:
        out = np.broadcast_to(proj.a_norm2 / n, (flips.shape[0], d)).copy()
    else:
        cf = (flips @ proj.C_flat).reshape(-1, d, q)
        out = (proj.a_norm2 - np.einsum("kdq,kdq->kd", cf, cf)) / n
    _check_variance(out, proj.a_norm2 / n)
    return out


def flip_statistics(proj, r, plan, variant="standardized"):
    """All ``g`` statistics for plan ``plan``; row 0 is the identity flip.

    Returns ``(stats, var_range)`` where ``stats`` has shape ``(g, d)`` and
    ``var_range`` is the (min, max) flip variance, or ``None`` for the
    effective variant.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {VARIANTS}")
    if plan.n != proj.n:
        raise ConfigurationError(f"flip length {plan.n} does not match n={proj.n}")
    stats = np.empty((plan.g, proj.d))
    vmin, vmax = np.inf, -np.inf
    for start, flips in plan.blocks():
        s = flip_scores(proj, r, flips)
        if variant == "standardized":
            var = flip_variances(proj, flips)
            vmin, vmax = min(vmin, var.min()), max(vmax, var.max())
            s = s / np.sqrt(var)
        stats[start : start + flips.shape[0]] = s
    return stats, ((float(vmin), float(vmax)) if variant == "standardized" else None)


# -- decision rule -----------------------------------------------------------


def critical_rank(alpha, g):
    """``ceil((1 - alpha) g)`` guarded against floating-point round-up."""
    return max(1, min(g, math.ceil((1.0 - alpha) * g - 1e-9)))


def adjust(stats, alternative):
    """Map statistics so that large values favour the alternative."""
    if alternative == "greater":
        return np.asarray(stats, dtype=float)
    if alternative == "less":
        return -np.asarray(stats, dtype=float)
    if alternative == "two_sided":
        return np.abs(stats)
    raise ConfigurationError(f"alternative must be one of {ALTERNATIVES}")


def decide(t, alpha):
    """p-value and decision for adjusted statistics ``t`` (``t[0]`` observed).

    Values within a relative ``1e-12`` of the observed one count as ties,
    and ties count toward the p-value. The null is rejected when ``t[0]``
    exceeds the ``ceil((1 - alpha) g)``-th order statistic.
    """
    t = np.asarray(t, dtype=float)
    g = t.size
    t0 = t[0]
    tol = TIE_TOL * max(abs(t0), np.max(np.abs(t)), np.finfo(float).tiny)
    t = np.where(np.abs(t - t0) <= tol, t0, t)
    p_value = np.count_nonzero(t >= t0) / g
    crit = np.sort(t)[critical_rank(alpha, g) - 1]
    return float(p_value), bool(t0 > crit)


@dataclass(frozen=True)
class ScoreTestResult:
    """Outcome of a sign-flip score test.

    ``stats_flipped[0]`` is the observed statistic. For the multivariate
    test the statistics are the combined quadratic forms.
    """

    stat_observed: float | np.ndarray
    stats_flipped: np.ndarray = field(repr=False)
    p_value: float
    reject: bool
    alternative: str
    variant: str
    alpha: float
    g: int
    diagnostics: dict = field(default_factory=dict)


def _check_level(alpha):
    if not 0 < alpha < 1:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")


def check_residuals(fit, data):
    """Raise if the residuals vanish, making every statistic 0."""
    resid = data.y - fit.mu_hat
    if np.max(np.abs(resid)) <= 1e-10 * max(np.max(np.abs(data.y)), 1.0):
        raise DegenerateStatisticError(
            "response equals the fitted null mean; the statistic is 0 for every flip"
        )


def univariate_test_from_fit(fit, proj, data, plan, variant="standardized",
                             alternative="two_sided", alpha=0.05):
    """Univariate test given an already fitted null model and projection."""
    _check_level(alpha)
    if proj.d != 1:
        raise ConfigurationError("univariate test needs exactly one target column")
    check_residuals(fit, data)
    stats, var_range = flip_statistics(proj, fit.pearson(data.y), plan, variant)
    stats = stats[:, 0]
    p_value, reject = decide(adjust(stats, alternative), alpha)
    diagnostics = {"a_norm2": float(proj.a_norm2[0])}
    if var_range is not None:
        diagnostics["flip_variance_min"], diagnostics["flip_variance_max"] = var_range
    return ScoreTestResult(
        stat_observed=float(stats[0]),
        stats_flipped=stats,
        p_value=p_value,
        reject=reject,
        alternative=alternative,
        variant=variant,
        alpha=alpha,
        g=plan.g,
        diagnostics=diagnostics,
    )


def run_univariate_test(data, family, plan, variant="standardized",
                        alternative="two_sided", alpha=0.05):
    """Fit the null model and run the sign-flip score test for ``d = 1``."""
    if data.d != 1:
        raise ConfigurationError("univariate test needs exactly one target column")
    fit = fit_null(data, family)
    proj = build_projection(fit, data)
    return univariate_test_from_fit(fit, proj, data, plan, variant, alternative, alpha)
