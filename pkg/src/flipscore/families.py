"""Exponential-dispersion families and their links.

Only the four family/link pairs needed for the simulation designs are
supported: gaussian/identity, poisson/log, binomial/logit and
negative binomial (NB2)/log.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, xlogy

from .errors import ConfigurationError, DomainError

#: Bound on |eta| for the log and logit links.
ETA_CLAMP = 30.0

_LINKS = {
    "gaussian": "identity",
    "poisson": "log",
    "binomial": "logit",
    "negative_binomial": "log",
}


@dataclass(frozen=True)
class Family:
    """Putative model for the response.

    Parameters
    ----------
    kind : str
        One of ``gaussian``, ``poisson``, ``binomial``,
        ``negative_binomial``.
    link : str, optional
        Link function. Defaults to the only admissible link for ``kind``.
    dispersion : float or None
        Negative-binomial dispersion ``phi`` in ``var = mu + phi * mu**2``.
        ``None`` means it is estimated when fitting. For the gaussian family
        this is the common variance used by :func:`variance_function`
        (the test itself always runs with 1). Ignored otherwise.
    """

    kind: str
    link: str | None = None
    dispersion: float | None = None

    def __post_init__(self):
        if self.kind not in _LINKS:
            raise ConfigurationError(
                f"unknown family {self.kind!r}; expected one of {sorted(_LINKS)}"
            )
        link = self.link or _LINKS[self.kind]
        if link != _LINKS[self.kind]:
            raise ConfigurationError(
                f"family {self.kind!r} only supports the {_LINKS[self.kind]!r} link"
            )
        object.__setattr__(self, "link", link)
        if self.dispersion is not None:
            disp = float(self.dispersion)
            if not np.isfinite(disp) or disp <= 0:
                raise ConfigurationError(f"dispersion must be positive, got {self.dispersion}")
            object.__setattr__(self, "dispersion", disp)

    @classmethod
    def gaussian(cls, sigma2=None):
        return cls("gaussian", dispersion=sigma2)

    @classmethod
    def poisson(cls):
        return cls("poisson")

    @classmethod
    def binomial(cls):
        return cls("binomial")

    @classmethod
    def negative_binomial(cls, dispersion=None):
        return cls("negative_binomial", dispersion=dispersion)

    @property
    def estimates_dispersion(self):
        return self.kind == "negative_binomial" and self.dispersion is None

    def with_dispersion(self, dispersion):
        return replace(self, dispersion=dispersion)

    def __str__(self):
        if self.kind == "negative_binomial" and self.dispersion is not None:
            return f"negative_binomial({self.dispersion:g})/{self.link}"
        return f"{self.kind}/{self.link}"


def clamp_eta(family, eta):
    """Clamp the linear predictor for links that exponentiate.

    Returns the clamped array and a boolean mask of entries that touched
    the bound.
    """
    eta = np.asarray(eta, dtype=float)
    if family.link == "identity":
        return eta, np.zeros(eta.shape, dtype=bool)
    hit = np.abs(eta) >= ETA_CLAMP
    return np.clip(eta, -ETA_CLAMP, ETA_CLAMP), hit


def linkinv(family, eta):
    eta, _ = clamp_eta(family, eta)
    if family.link == "identity":
        return eta.copy()
    if family.link == "log":
        return np.exp(eta)
    return expit(eta)


def linkfun(family, mu):
    mu = np.asarray(mu, dtype=float)
    if family.link == "identity":
        return mu.copy()
    if family.link == "log":
        return np.log(mu)
    return np.log(mu) - np.log1p(-mu)


def mean_derivative(family, eta):
    """d mu / d eta for the family's link, with eta clamped to +-30."""
    eta_arr = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta_arr)):
        raise DomainError("linear predictor contains non-finite values")
    eta_arr, _ = clamp_eta(family, eta_arr)
    if family.link == "identity":
        out = np.ones_like(eta_arr)
    elif family.link == "log":
        out = np.exp(eta_arr)
    else:
        p = expit(eta_arr)
        out = p * (1.0 - p)
    return out if out.ndim else float(out)


def _check_mu(family, mu):
    if not np.all(np.isfinite(mu)):
        raise DomainError("mean contains non-finite values")
    if family.kind in ("poisson", "negative_binomial") and np.any(mu <= 0):
        raise DomainError(f"{family.kind} mean must be positive")
    if family.kind == "binomial" and np.any((mu <= 0) | (mu >= 1)):
        raise DomainError("binomial mean must lie in (0, 1)")


def variance_function(family, mu):
    """Variance of y at mean ``mu`` under the putative model.

    gaussian: ``phi`` (1 unless the family carries a variance);
    poisson: ``mu``; binomial: ``mu (1 - mu)``; negative binomial:
    ``mu + phi mu**2``.
    """
    mu_arr = np.asarray(mu, dtype=float)
    _check_mu(family, mu_arr)
    if family.kind == "gaussian":
        phi = 1.0 if family.dispersion is None else family.dispersion
        out = np.full_like(mu_arr, phi)
    elif family.kind == "poisson":
        out = mu_arr.copy()
    elif family.kind == "binomial":
        out = mu_arr * (1.0 - mu_arr)
    else:
        if family.dispersion is None:
            raise DomainError("negative binomial variance needs a dispersion value")
        out = mu_arr + family.dispersion * mu_arr**2
    return out if out.ndim else float(out)


def deviance(family, y, mu):
    """Residual deviance (up to terms constant in mu for NB)."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if family.kind == "gaussian":
        return float(np.sum((y - mu) ** 2))
    if family.kind == "poisson":
        return float(2.0 * np.sum(xlogy(y, y / mu) - (y - mu)))
    if family.kind == "binomial":
        return float(2.0 * np.sum(xlogy(y, y / mu) + xlogy(1 - y, (1 - y) / (1 - mu))))
    theta = 1.0 / family.dispersion
    return float(
        2.0 * np.sum(xlogy(y, y / mu) - (y + theta) * np.log((y + theta) / (mu + theta)))
    )
