"""Dense reference computations.

Slow, direct implementations used to cross-check the fast kernels in
:mod:`flipscore.score` and by ``flipscore selfcheck``. Everything here forms
``n x n`` matrices, so inputs are capped at ``n <= 2000``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, RankDeficiencyError

MAX_DENSE_N = 2000
MAX_ENUM_N = 14


def _guard(n):
    if n > MAX_DENSE_N:
        raise ConfigurationError(f"dense reference limited to n <= {MAX_DENSE_N}, got {n}")


@dataclass(frozen=True)
class DenseModel:
    """Dense hat matrix and Fisher-information blocks at the null fit."""

    H_dense: np.ndarray
    info_bb: np.ndarray
    info_bg: np.ndarray
    info_gb: np.ndarray
    info_gg: np.ndarray

    @property
    def info_blocks(self):
        return self.info_bb, self.info_bg, self.info_gb, self.info_gg


def dense_hat(w, Z):
    """``W^{1/2} Z (Z' W Z)^{-1} Z' W^{1/2}`` formed explicitly."""
    w = np.asarray(w, dtype=float)
    _guard(w.size)
    if Z.shape[1] == 0:
        return np.zeros((w.size, w.size))
    sw = np.sqrt(w)
    wz = Z * sw[:, None]
    zwz = Z.T @ (Z * w[:, None])
    try:
        return wz @ np.linalg.solve(zwz, wz.T)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError("Z' W Z is singular") from None


def dense_model(fit, data):
    _guard(data.n)
    w = fit.w_diag
    X, Z = data.X, data.Z
    return DenseModel(
        H_dense=dense_hat(w, Z),
        info_bb=X.T @ (X * w[:, None]),
        info_bg=X.T @ (Z * w[:, None]),
        info_gb=Z.T @ (X * w[:, None]),
        info_gg=Z.T @ (Z * w[:, None]),
    )


def dense_effective_score(fit, data, flip):
    """``n^{-1/2} (s_beta - I_bg I_gg^{-1} s_gamma)`` with the flip applied
    to the residuals, built from raw score and information blocks."""
    _guard(data.n)
    flip = np.asarray(flip, dtype=float)
    e = flip * (data.y - fit.mu_hat) * fit.d_diag / fit.v_diag
    s_beta = data.X.T @ e
    if data.q:
        model = dense_model(fit, data)
        s_gamma = data.Z.T @ e
        try:
            s_beta = s_beta - model.info_bg @ np.linalg.solve(model.info_gg, s_gamma)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError("I_gamma,gamma is singular") from None
    return s_beta / math.sqrt(data.n)


def dense_a(fit, data):
    """``a = (I - H) W^{1/2} X`` with a dense ``H``."""
    H = dense_hat(fit.w_diag, data.Z)
    wx = data.X * np.sqrt(fit.w_diag)[:, None]
    return wx - H @ wx


def dense_flip_variance(fit, data, flip):
    """``n^{-1} A' F (I - H) F A`` as a ``(d, d)`` matrix."""
    n = data.n
    _guard(n)
    H = dense_hat(fit.w_diag, data.Z)
    A = dense_a(fit, data)
    FA = A * np.asarray(flip, dtype=float)[:, None]
    return (FA.T @ FA - FA.T @ H @ FA) / n


def enumerate_flips(n):
    """All ``2**n`` sign vectors, ordered so the all-ones vector is first."""
    if not 1 <= n <= MAX_ENUM_N:
        raise ConfigurationError(f"exhaustive enumeration needs 1 <= n <= {MAX_ENUM_N}")
    return np.array(list(itertools.product((1.0, -1.0), repeat=n)))


def flip_sandwich_sum(C):
    """``sum_F F C F`` over every flipping matrix of matching size.

    Integer inputs are summed exactly in ``int64``.
    """
    C = np.asarray(C)
    n = C.shape[0]
    flips = enumerate_flips(n)
    if np.issubdtype(C.dtype, np.integer):
        flips = flips.astype(np.int64)
    # F C F has entries f_i C_ij f_j
    return np.einsum("ki,ij,kj->ij", flips, C, flips)
