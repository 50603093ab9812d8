import numpy as np
import pytest

from flipscore import DesignData, Family, fit_null


def make_problem(seed, n=40, q=3, d=1, family="poisson", het=0.0):
    """Small random GLM problem: returns ``(data, fit)`` under H0."""
    rng = np.random.default_rng(seed)
    Z = np.column_stack([np.ones(n), rng.standard_normal((n, q - 1))]) if q else np.empty((n, 0))
    z1 = Z[:, 1] if q > 1 else np.zeros(n)
    X = rng.standard_normal((n, d)) + 0.4 * z1[:, None]
    if family == "poisson":
        y = rng.poisson(np.exp(0.4 + 0.3 * z1)).astype(float)
        fam = Family.poisson()
    elif family == "binomial":
        y = (rng.random(n) < 1 / (1 + np.exp(-0.5 * z1))).astype(float)
        fam = Family.binomial()
    elif family == "negative_binomial":
        mu = np.exp(1.0 + 0.3 * z1)
        y = rng.poisson(mu * rng.gamma(2.0, 0.5, n)).astype(float)
        fam = Family.negative_binomial()
    else:
        y = 1.0 + z1 + rng.standard_normal(n) * np.exp(het * X[:, 0])
        fam = Family.gaussian()
    data = DesignData(y, X, Z)
    return data, fit_null(data, fam)


@pytest.fixture
def poisson_problem():
    return make_problem(0, n=60, q=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# (criterion, status, detail) tuples filled by test_acceptance.py
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit, status, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: int(r[0])):
        terminalreporter.write_line(f"criterion {crit:>2}: {status:<12} {detail}")
