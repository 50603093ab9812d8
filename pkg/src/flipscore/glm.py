"""Design data and IRLS fitting of the null (and full) GLM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import (
    BoundaryError,
    ConvergenceError,
    DataError,
    RankDeficiencyError,
)
from .families import (
    Family,
    clamp_eta,
    deviance,
    linkfun,
    linkinv,
    mean_derivative,
    variance_function,
)

MAX_ITER = 50
DEVIANCE_TOL = 1e-10
MAX_HALVINGS = 10
DISPERSION_TOL = 1e-8
DISPERSION_FLOOR = 1e-8
BOUNDARY_EPS = 1e-8
SCORE_TOL = 1e-9
MAX_POLISH = 10


def _as_matrix(a, n, name):
    a = np.array(a, dtype=float)  # private copy; it is frozen below
    if a.ndim == 1:
        a = a.reshape(n, -1) if a.size else np.empty((n, 0))
    if a.ndim != 2 or a.shape[0] != n:
        raise DataError(f"{name} must have {n} rows, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class DesignData:
    """Response, target design ``X``, nuisance design ``Z`` and ``beta0``.

    ``Z`` should contain the intercept column when the model has one. It may
    have zero columns (no nuisance parameters).
    """

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    beta0: np.ndarray | None = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float).ravel()
        n = y.size
        X = _as_matrix(self.X, n, "X")
        Z = _as_matrix(self.Z, n, "Z")
        d, q = X.shape[1], Z.shape[1]
        if d < 1:
            raise DataError("X needs at least one target column")
        if n <= q + d:
            raise DataError(f"need n > q + d, got n={n}, q={q}, d={d}")
        beta0 = np.zeros(d) if self.beta0 is None else np.array(self.beta0, float).ravel()
        if beta0.size != d:
            raise DataError(f"beta0 has length {beta0.size}, expected {d}")
        for name, arr in (("y", y), ("X", X), ("Z", Z), ("beta0", beta0)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
        if q and np.linalg.matrix_rank(Z) < q:
            raise RankDeficiencyError("nuisance design Z is not of full column rank")
        for name, arr in (("y", y), ("X", X), ("Z", Z), ("beta0", beta0)):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "beta0", beta0)

    @property
    def n(self):
        return self.y.size

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def q(self):
        return self.Z.shape[1]

    @property
    def offset(self):
        return self.X @ self.beta0


@dataclass(frozen=True)
class GLMFit:
    """Result of an IRLS fit with a fixed offset."""

    coef: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    family: Family
    iterations: int
    deviance: float
    deviance_trace: tuple = ()
    clamped: bool = False


@dataclass(frozen=True)
class NullFit:
    """Null-model fit with every per-observation factor the tests need.

    ``v_diag`` is the working variance under the putative model, with the
    gaussian variance fixed at 1 unless the family carries one; ``phi_hat``
    is the estimated common dispersion (residual mean square for gaussian,
    the fitted NB dispersion, 1 otherwise).
    """

    gamma_hat: np.ndarray
    mu_hat: np.ndarray
    eta_hat: np.ndarray
    d_diag: np.ndarray
    v_diag: np.ndarray
    w_diag: np.ndarray
    phi_hat: float
    family: Family
    converged: bool
    iterations: int
    deviance: float = float("nan")
    deviance_trace: tuple = field(default=(), repr=False)
    clamped: bool = False

    def pearson(self, y):
        """Standardized residuals ``V^{-1/2} (y - mu_hat)``."""
        return (np.asarray(y, float) - self.mu_hat) / np.sqrt(self.v_diag)

    def rescaled(self, c):
        """Same fit with the working variance multiplied by ``c``.

        The coefficients are unchanged because IRLS weights only matter up
        to a common factor.
        """
        c = float(c)
        return NullFit(
            gamma_hat=self.gamma_hat,
            mu_hat=self.mu_hat,
            eta_hat=self.eta_hat,
            d_diag=self.d_diag,
            v_diag=self.v_diag * c,
            w_diag=self.w_diag / c,
            phi_hat=self.phi_hat,
            family=self.family,
            converged=self.converged,
            iterations=self.iterations,
            deviance=self.deviance,
            deviance_trace=self.deviance_trace,
            clamped=self.clamped,
        )


def _check_response(family, y):
    if family.kind == "binomial" and np.any((y < 0) | (y > 1)):
        raise DataError("binomial response must lie in [0, 1]")
    if family.kind in ("poisson", "negative_binomial") and np.any(y < 0):
        raise DataError(f"{family.kind} response must be non-negative")


def _mustart(family, y):
    if family.kind == "gaussian":
        return y.copy()
    if family.kind == "binomial":
        return (y + 0.5) / 2.0
    return y + 0.1


def irls(y, design, offset, family, start=None, max_iter=MAX_ITER, tol=DEVIANCE_TOL):
    """Fit ``g(mu) = offset + design @ coef`` by IRLS with step-halving.

    Convergence is declared when the relative deviance change drops below
    ``tol``. Deviance increases trigger up to 10 halvings of the step.
    Raises :class:`ConvergenceError` after ``max_iter`` iterations.
    """
    y = np.asarray(y, dtype=float)
    design = np.asarray(design, dtype=float)
    offset = np.asarray(offset, dtype=float)
    n, p = design.shape
    if p == 0:
        eta, hit = clamp_eta(family, offset)
        mu = linkinv(family, eta)
        dev = deviance(family, y, mu)
        return GLMFit(np.empty(0), eta, mu, family, 0, dev, (dev,), bool(hit.any()))

    if start is None:
        mu = _mustart(family, y)
        eta = linkfun(family, mu)
        coef_old = None
        dev_old = np.inf
    else:
        coef_old = np.asarray(start, dtype=float)
        eta, _ = clamp_eta(family, offset + design @ coef_old)
        mu = linkinv(family, eta)
        dev_old = deviance(family, y, mu)

    trace = []
    coef = coef_old
    for it in range(1, max_iter + 1):
        d = mean_derivative(family, eta)
        v = variance_function(family, mu)
        w = d * d / v
        z = eta - offset + (y - mu) / d
        sw = np.sqrt(w)
        coef, *_ = np.linalg.lstsq(design * sw[:, None], z * sw, rcond=None)

        eta, _ = clamp_eta(family, offset + design @ coef)
        mu = linkinv(family, eta)
        dev = deviance(family, y, mu)
        halvings = 0
        while coef_old is not None and not (np.isfinite(dev) and dev <= dev_old * (1 + 1e-12) + 1e-12):
            if halvings == MAX_HALVINGS:
                raise ConvergenceError(
                    "IRLS step-halving failed to reduce the deviance",
                    last_iterate=coef,
                    iterations=it,
                )
            coef = 0.5 * (coef + coef_old)
            eta, _ = clamp_eta(family, offset + design @ coef)
            mu = linkinv(family, eta)
            dev = deviance(family, y, mu)
            halvings += 1
        trace.append(dev)

        if abs(dev - dev_old) / (abs(dev) + 0.1) < tol:
            _, hit = clamp_eta(family, offset + design @ coef)
            if not hit.any():
                coef, eta, mu, dev, extra = _polish(y, design, offset, family, coef, eta, mu, dev)
                it += extra
            return GLMFit(coef, eta, mu, family, it, dev, tuple(trace), bool(hit.any()))
        coef_old, dev_old = coef, dev

    raise ConvergenceError(
        f"IRLS did not converge in {max_iter} iterations", last_iterate=coef, iterations=max_iter
    )


def _score(y, design, family, eta, mu):
    d = mean_derivative(family, eta)
    return design.T @ ((y - mu) * d / variance_function(family, mu))


def _polish(y, design, offset, family, coef, eta, mu, dev):
    """Extra IRLS steps after the deviance rule fires.

    With a non-canonical link IRLS converges only linearly, so a tiny
    deviance change can leave the nuisance score around 1e-5. Steps
    continue while the score exceeds ``SCORE_TOL`` (relative to the
    response and column scales) and keeps shrinking; never raises.
    """
    scale = max(float(np.max(np.abs(y))), 1.0) * np.maximum(np.max(np.abs(design), axis=0), 1.0)
    score = np.max(np.abs(_score(y, design, family, eta, mu)) / scale)
    extra = 0
    while score > SCORE_TOL and extra < MAX_POLISH:
        d = mean_derivative(family, eta)
        w = d * d / variance_function(family, mu)
        z = eta - offset + (y - mu) / d
        sw = np.sqrt(w)
        new, *_ = np.linalg.lstsq(design * sw[:, None], z * sw, rcond=None)
        new_eta, hit = clamp_eta(family, offset + design @ new)
        new_mu = linkinv(family, new_eta)
        new_score = np.max(np.abs(_score(y, design, family, new_eta, new_mu)) / scale)
        if hit.any() or not new_score < 0.5 * score:
            break
        coef, eta, mu, score = new, new_eta, new_mu, new_score
        dev = deviance(family, y, mu)
        extra += 1
    return coef, eta, mu, dev, extra


def pearson_dispersion(y, mu, df_resid):
    """Negative-binomial ``phi`` solving the Pearson moment equation.

    Finds ``phi`` with ``sum((y - mu)**2 / (mu + phi mu**2)) = df_resid``.
    Underdispersed data get the floor value.
    """
    r2 = (y - mu) ** 2
    mu2 = mu * mu

    def excess(phi):
        return np.sum(r2 / (mu + phi * mu2)) - df_resid

    if excess(DISPERSION_FLOOR) <= 0:
        return DISPERSION_FLOOR
    hi = 1.0
    while excess(hi) > 0:
        hi *= 2.0
        if hi > 1e12:
            raise ConvergenceError("dispersion estimate diverged")
    return float(brentq(excess, DISPERSION_FLOOR, hi, xtol=1e-14, rtol=1e-13))


def fit_glm(y, design, offset, family):
    """IRLS fit; negative binomial with unknown dispersion alternates
    IRLS for the coefficients with the Pearson update for ``phi``."""
    y = np.asarray(y, dtype=float)
    _check_response(family, y)
    if not family.estimates_dispersion:
        fit = irls(y, design, offset, family)
    else:
        df_resid = y.size - design.shape[1]
        pois = irls(y, design, offset, Family.poisson())
        phi = pearson_dispersion(y, pois.mu, df_resid)
        start = pois.coef if design.shape[1] else None
        total = pois.iterations
        for _ in range(MAX_ITER):
            fit = irls(y, design, offset, family.with_dispersion(phi), start=start)
            total += fit.iterations
            phi_new = pearson_dispersion(y, fit.mu, df_resid)
            if abs(phi_new - phi) <= DISPERSION_TOL * phi:
                break
            phi, start = phi_new, (fit.coef if design.shape[1] else None)
        else:
            raise ConvergenceError(
                "negative binomial dispersion did not converge", last_iterate=fit.coef
            )
        fit = GLMFit(
            fit.coef, fit.eta, fit.mu, fit.family, total, fit.deviance, fit.deviance_trace, fit.clamped
        )
    _check_boundary(fit)
    return fit


def _check_boundary(fit):
    mu = fit.mu
    if fit.clamped:
        raise BoundaryError("linear predictor hit the clamp; fitted means at the boundary")
    if fit.family.kind == "binomial" and np.any(np.minimum(mu, 1 - mu) < BOUNDARY_EPS):
        raise BoundaryError("fitted probabilities pinned at 0 or 1 (perfect separation)")
    if fit.family.link == "log" and np.any(mu < BOUNDARY_EPS):
        raise BoundaryError("fitted means pinned at 0")


def fit_null(data, family):
    """Fit the null model, holding the target part ``X beta0`` as an offset.

    Returns a :class:`NullFit` with ``mu_hat`` and the diagonal factors
    ``d = dmu/deta``, ``v`` (working variance) and ``w = d**2 / v``.
    """
    fit = fit_glm(data.y, data.Z, data.offset, family)
    fam = fit.family
    d = np.asarray(mean_derivative(fam, fit.eta), dtype=float)
    v = np.asarray(variance_function(fam, fit.mu), dtype=float)
    w = d * d / v
    if fam.kind == "gaussian":
        phi_hat = float(np.sum((data.y - fit.mu) ** 2) / (data.n - data.q))
    elif fam.kind == "negative_binomial":
        phi_hat = fam.dispersion
    else:
        phi_hat = 1.0
    if not (np.all(np.isfinite(w)) and np.all(w > 0) and np.all(v > 0)):
        raise BoundaryError("non-positive or non-finite working weights at the null fit")
    for arr in (fit.coef, fit.mu, fit.eta, d, v, w):
        arr.setflags(write=False)
    return NullFit(
        gamma_hat=fit.coef,
        mu_hat=fit.mu,
        eta_hat=fit.eta,
        d_diag=d,
        v_diag=v,
        w_diag=w,
        phi_hat=phi_hat,
        family=fam,
        converged=True,
        iterations=fit.iterations,
        deviance=fit.deviance,
        deviance_trace=fit.deviance_trace,
        clamped=fit.clamped,
    )
