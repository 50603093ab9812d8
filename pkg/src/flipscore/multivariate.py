"""Standardized sign-flip test for several target coefficients.

Each flipped score vector is whitened by the inverse square root of its
own ``d x d`` flip covariance, then combined into a quadratic form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateStatisticError
from .glm import fit_null
from .score import (
    ScoreTestResult,
    _check_level,
    build_projection,
    check_residuals,
    decide,
    effective_score,
    flip_scores,
    run_univariate_test,
)

EIG_FLOOR = 1e-12
DEGENERATE_EIG = 1e-10


@dataclass(frozen=True)
class CombineMatrix:
    """Symmetric PSD matrix ``M`` of the combined statistic ``s' M s``."""

    M: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        if M.shape[0] != M.shape[1]:
            raise ConfigurationError(f"combining matrix must be square, got {M.shape}")
        if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
            raise ConfigurationError("combining matrix must be symmetric")
        if np.linalg.eigvalsh(M).min() < -1e-10:
            raise ConfigurationError("combining matrix must be positive semi-definite")
        if not np.any(M):
            raise ConfigurationError("combining matrix must be non-zero")
        M = M.copy()
        M.setflags(write=False)
        object.__setattr__(self, "M", M)

    @property
    def d(self):
        return self.M.shape[0]

    @classmethod
    def identity(cls, d):
        return cls(np.eye(d), "identity")

    @classmethod
    def inverse_score_covariance(cls, proj):
        """Inverse of the identity-flip covariance of the standardized
        score vector (equal to ``I_d`` up to rounding)."""
        v_id = proj.a_cols.T @ proj.a_cols / proj.n
        root = _inv_sqrt(v_id[None])[0]
        cov = root @ v_id @ root
        cov = 0.5 * (cov + cov.T)
        return cls(np.linalg.inv(cov), "inverse_score_covariance")


def _inv_sqrt(V):
    """Batched symmetric inverse square roots with an eigenvalue floor."""
    lam, Q = np.linalg.eigh(V)
    top = lam[:, -1:]
    if np.any(lam < DEGENERATE_EIG * np.trace(V, axis1=1, axis2=2)[:, None] / V.shape[-1]):
        raise DegenerateStatisticError("flip covariance matrix is (near) singular")
    lam = np.maximum(lam, EIG_FLOOR * top)
    return (Q / np.sqrt(lam)[:, None, :]) @ np.swapaxes(Q, 1, 2)


def flip_covariances(proj, flips):
    """``(k, d, d)`` plug-in covariances ``n^{-1} A' F (I - H) F A``."""
    n, q, d = proj.n, proj.q, proj.d
    A = proj.a_cols
    base = A.T @ A
    if q == 0:
        return np.broadcast_to(base / n, (flips.shape[0], d, d)).copy()
    UA = (proj.U[:, :, None] * A[:, None, :]).reshape(n, q * d)
    B = (flips @ UA).reshape(-1, q, d)
    return (base - np.einsum("kqi,kqj->kij", B, B)) / n


def flip_covariance(proj, flip):
    return flip_covariances(proj, np.asarray(flip, dtype=float)[None])[0]


def standardized_score_vector(proj, fit, data, flip):
    """``V_F^{-1/2} S(F)`` for a single flip."""
    s = effective_score(proj, fit, data, flip)
    root = _inv_sqrt(flip_covariance(proj, flip)[None])[0]
    return root @ s


def combined_statistic(s_star, M):
    """Quadratic form ``s' M s``."""
    M = M.M if isinstance(M, CombineMatrix) else np.atleast_2d(np.asarray(M, float))
    s_star = np.atleast_1d(np.asarray(s_star, dtype=float))
    if M.shape != (s_star.size, s_star.size):
        raise ConfigurationError(
            f"dimension mismatch: statistic has {s_star.size} entries, M is {M.shape}"
        )
    return float(s_star @ M @ s_star)


def combined_statistics(proj, r, plan, M):
    """``T*`` for every flip of ``plan``."""
    out = np.empty(plan.g)
    for start, flips in plan.blocks():
        s = flip_scores(proj, r, flips)
        z = np.einsum("kij,kj->ki", _inv_sqrt(flip_covariances(proj, flips)), s)
        out[start : start + flips.shape[0]] = np.einsum("ki,ij,kj->k", z, M.M, z)
    return out


def run_multivariate_test(data, family, plan, M=None, alpha=0.05):
    """Sign-flip test of all ``d`` target coefficients jointly.

    ``d = 1`` delegates to the two-sided standardized univariate test.
    """
    _check_level(alpha)
    if data.d == 1:
        return run_univariate_test(data, family, plan, "standardized", "two_sided", alpha)
    fit = fit_null(data, family)
    proj = build_projection(fit, data)
    return multivariate_test_from_fit(fit, proj, data, plan, M, alpha)


def multivariate_test_from_fit(fit, proj, data, plan, M=None, alpha=0.05):
    if plan.n != proj.n:
        raise ConfigurationError(f"flip length {plan.n} does not match n={proj.n}")
    if M is None:
        M = CombineMatrix.identity(proj.d)
    elif isinstance(M, str):
        if M == "identity":
            M = CombineMatrix.identity(proj.d)
        elif M == "inverse_score_covariance":
            M = CombineMatrix.inverse_score_covariance(proj)
        else:
            raise ConfigurationError(f"unknown combining matrix {M!r}")
    elif not isinstance(M, CombineMatrix):
        M = CombineMatrix(M)
    if M.d != proj.d:
        raise ConfigurationError(f"combining matrix is {M.d}x{M.d}, expected d={proj.d}")
    check_residuals(fit, data)
    stats = combined_statistics(proj, fit.pearson(data.y), plan, M)
    p_value, reject = decide(stats, alpha)
    return ScoreTestResult(
        stat_observed=float(stats[0]),
        stats_flipped=stats,
        p_value=p_value,
        reject=reject,
        alternative="two_sided",
        variant="standardized",
        alpha=alpha,
        g=plan.g,
        diagnostics={
            "a_norm2": proj.a_norm2.tolist(),
            "combine": M.kind,
            "d": proj.d,
        },
    )
