"""Monte Carlo harness for type-I error and power of the four tests.

Each replicate draws its data and its flips from streams keyed by
``(master_seed, scenario, n, replicate)``, and per-cell tallies are plain
sums, so results do not depend on how replicates are scheduled.
"""

from __future__ import annotations

import logging
import math
import os
import time
import zlib
from collections.abc import Mapping
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import yaml
from scipy.special import expit
from scipy.stats import norm
from threadpoolctl import threadpool_limits

from .comparators import full_model_covariance
from .errors import ConfigurationError, FlipScoreError
from .families import Family
from .glm import DesignData, fit_glm, fit_null
from .rng import FlipPlan
from .score import adjust, build_projection, check_residuals, decide, flip_scores, flip_variances

log = logging.getLogger(__name__)

TESTS = ("standardized", "effective", "parametric", "sandwich")
FULL_N_GRID = (25, 50, 100, 200, 500, 1000)
MAX_FAILURE_RATE = 0.05
THREADS_ENV = "FLIPSCORE_THREADS"

#: Correlations of the target covariate with the three nuisance covariates.
TARGET_NUISANCE_CORR = (0.5, 0.1, 0.1)

# Unstated design constants. They are copied into every summary's metadata.
DGP_DEFAULTS = {
    "poisson_correct": {"beta": 0.0, "intercept": math.log(2.0)},
    "logistic_correct": {"beta": 0.0, "intercept": 0.0},
    "gaussian_hetero_nuisance": {"beta": 0.0, "intercept": 0.0, "sd_scale": 2.0},
    "gaussian_hetero_target": {"beta": 0.0, "intercept": 0.0, "sd_scale": 2.0},
    "poisson_fits_negbin": {"beta": 0.0, "intercept": math.log(2.0), "nb_dispersion": 1.0},
    "negbin_two_group_unequal_dispersion": {
        "beta": 0.0,
        "intercept": math.log(10.0),
        "minority_fraction": 1.0 / 3.0,
        "majority_dispersion": 0.4,
        "minority_dispersion": 1.0,
    },
    "poisson_power": {"beta": 0.3, "intercept": math.log(2.0)},
    "gaussian_power": {"beta": 1.0, "intercept": 0.0, "noise_sd": 2.0},
}
DGPS = tuple(DGP_DEFAULTS)

_FIT_FAMILY = {
    "poisson_correct": Family.poisson(),
    "logistic_correct": Family.binomial(),
    "gaussian_hetero_nuisance": Family.gaussian(),
    "gaussian_hetero_target": Family.gaussian(),
    "poisson_fits_negbin": Family.poisson(),
    "negbin_two_group_unequal_dispersion": Family.negative_binomial(),
    "poisson_power": Family.poisson(),
    "gaussian_power": Family.gaussian(),
}


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation setting.

    ``params`` overrides entries of the DGP defaults (intercepts, noise
    scales, dispersions); ``beta_true`` of ``None`` takes the DGP default.
    """

    name: str
    dgp: str
    beta_true: float | None = None
    n_grid: tuple = FULL_N_GRID
    replications: int = 2000
    alpha: float = 0.05
    g_flips: int = 1000
    tests: tuple = TESTS
    master_seed: int = 20240101
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.dgp not in DGP_DEFAULTS:
            raise ConfigurationError(f"unknown dgp {self.dgp!r}; valid: {', '.join(DGPS)}")
        n_grid = tuple(int(n) for n in np.atleast_1d(self.n_grid))
        if not n_grid or any(b <= a for a, b in zip(n_grid, n_grid[1:])):
            raise ConfigurationError("n_grid must be non-empty and strictly increasing")
        if int(self.replications) < 100:
            raise ConfigurationError(f"replications must be >= 100, got {self.replications}")
        if not 0 < self.alpha < 1:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if int(self.g_flips) < 2:
            raise ConfigurationError("g_flips must be >= 2")
        tests = tuple(self.tests)
        bad = set(tests) - set(TESTS)
        if bad or not tests:
            raise ConfigurationError(f"tests must be a non-empty subset of {TESTS}")
        unknown = set(self.params) - set(DGP_DEFAULTS[self.dgp])
        if unknown:
            raise ConfigurationError(f"unknown parameters for {self.dgp}: {sorted(unknown)}")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ConfigurationError("master_seed must fit in 64 bits")
        object.__setattr__(self, "n_grid", n_grid)
        object.__setattr__(self, "tests", tuple(t for t in TESTS if t in tests))
        object.__setattr__(self, "replications", int(self.replications))
        object.__setattr__(self, "g_flips", int(self.g_flips))
        object.__setattr__(self, "params", dict(self.params))

    @property
    def dgp_params(self):
        out = {**DGP_DEFAULTS[self.dgp], **self.params}
        if self.beta_true is not None:
            out["beta"] = float(self.beta_true)
        return out

    @property
    def fit_family(self):
        return _FIT_FAMILY[self.dgp]

    @property
    def key(self):
        return zlib.crc32(self.name.encode())


def default_scenario(name, **overrides):
    """Catalogue scenario whose name equals its DGP."""
    if name not in DGP_DEFAULTS:
        raise ConfigurationError(f"unknown scenario {name!r}; valid names: {', '.join(DGPS)}")
    return ScenarioConfig(name=name, dgp=name, **overrides)


def load_scenarios(path):
    """Read scenarios from a YAML file.

    The file holds an optional ``defaults`` mapping and a ``scenarios``
    list (or mapping keyed by name); each entry takes ScenarioConfig
    fields, with ``dgp`` defaulting to the name.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigurationError(f"cannot read scenario file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"malformed scenario file {path}: {exc}") from exc
    defaults = dict(doc.get("defaults") or {})
    entries = doc.get("scenarios") or []
    if isinstance(entries, Mapping):
        entries = [{"name": k, **(v or {})} for k, v in entries.items()]
    out = []
    for entry in entries:
        fields = {**defaults, **entry}
        if "name" not in fields:
            raise ConfigurationError(f"scenario entry without a name in {path}")
        fields.setdefault("dgp", fields["name"])
        try:
            out.append(ScenarioConfig(**fields))
        except TypeError as exc:
            raise ConfigurationError(f"bad scenario {fields['name']!r}: {exc}") from exc
    if not out:
        raise ConfigurationError(f"no scenarios in {path}")
    return out


# -- data generation ---------------------------------------------------------


@dataclass(frozen=True)
class DatasetTruth:
    mu: np.ndarray
    variance: np.ndarray
    beta: float


def covariate_covariance():
    """Covariance of ``(x, z1, z2, z3)``: unit variances, the target
    correlated with the nuisance covariates, nuisance mutually uncorrelated."""
    c = np.eye(4)
    c[0, 1:] = c[1:, 0] = TARGET_NUISANCE_CORR
    return c


def _draw_covariates(rng, n):
    L = np.linalg.cholesky(covariate_covariance())
    return rng.standard_normal((n, 4)) @ L.T


def _negbin(rng, mu, phi):
    """NB2 draws with ``var = mu + phi mu^2`` via the gamma-Poisson mixture."""
    lam = rng.gamma(shape=1.0 / phi, scale=phi * mu)
    return rng.poisson(lam).astype(float)


def generate_dataset(config, n, replicate_seed):
    """Draw one dataset; returns ``(DesignData, DatasetTruth)``.

    ``replicate_seed`` is an int or a :class:`numpy.random.SeedSequence`.
    """
    rng = np.random.default_rng(replicate_seed)
    p = config.dgp_params
    beta = p["beta"]
    dgp = config.dgp

    if dgp == "negbin_two_group_unequal_dispersion":
        n_min = int(round(n * p["minority_fraction"]))
        x = np.zeros(n)
        x[rng.permutation(n)[:n_min]] = 1.0
        mu = np.exp(p["intercept"] + beta * x)
        phi = np.where(x == 1.0, p["minority_dispersion"], p["majority_dispersion"])
        y = _negbin(rng, mu, phi)
        data = DesignData(y, x[:, None], np.ones((n, 1)), np.zeros(1))
        return data, DatasetTruth(mu, mu + phi * mu**2, beta)

    cov = _draw_covariates(rng, n)
    x, zc = cov[:, 0], cov[:, 1:]
    eta = p["intercept"] + beta * x
    if dgp in ("poisson_correct", "poisson_power"):
        mu = np.exp(eta)
        y = rng.poisson(mu).astype(float)
        var = mu
    elif dgp == "logistic_correct":
        mu = expit(eta)
        y = (rng.random(n) < mu).astype(float)
        var = mu * (1 - mu)
    elif dgp == "poisson_fits_negbin":
        mu = np.exp(eta)
        phi = p["nb_dispersion"]
        y = _negbin(rng, mu, phi)
        var = mu + phi * mu**2
    else:
        mu = eta
        if dgp == "gaussian_hetero_nuisance":
            sd = p["sd_scale"] * np.abs(zc[:, 0])
        elif dgp == "gaussian_hetero_target":
            sd = p["sd_scale"] * np.abs(x)
        else:
            sd = np.full(n, p["noise_sd"])
        y = mu + sd * rng.standard_normal(n)
        var = sd**2
    Z = np.column_stack([np.ones(n), zc])
    data = DesignData(y, x[:, None], Z, np.zeros(1))
    return data, DatasetTruth(mu, var, beta)


# -- one replicate -------------------------------------------------------------


def replicate_streams(config, n, rep):
    """``(data seed sequence, flip seed)`` for one replicate."""
    base = (config.key, int(n), int(rep))
    data_ss = np.random.SeedSequence(config.master_seed, spawn_key=base + (0,))
    words = np.random.SeedSequence(config.master_seed, spawn_key=base + (1,)).generate_state(2)
    flip_seed = int(words[0]) | (int(words[1]) << 32)
    return data_ss, flip_seed


def run_replicate(config, n, rep):
    """Decisions of each selected test on one dataset; ``None`` marks a
    failed fit or degenerate statistic for that test."""
    data_ss, flip_seed = replicate_streams(config, n, rep)
    data, _ = generate_dataset(config, n, data_ss)
    family = config.fit_family
    out = {}
    flip_tests = [t for t in ("standardized", "effective") if t in config.tests]
    if flip_tests:
        try:
            fit = fit_null(data, family)
            proj = build_projection(fit, data)
            check_residuals(fit, data)
            plan = FlipPlan(n=n, g=config.g_flips, seed=flip_seed)
            r = fit.pearson(data.y)
            scores = np.empty(plan.g)
            variances = np.empty(plan.g)
            for start, flips in plan.blocks():
                stop = start + flips.shape[0]
                scores[start:stop] = flip_scores(proj, r, flips)[:, 0]
                if "standardized" in flip_tests:
                    variances[start:stop] = flip_variances(proj, flips)[:, 0]
            stats = {"effective": scores}
            if "standardized" in flip_tests:
                stats["standardized"] = scores / np.sqrt(variances)
            for t in flip_tests:
                out[t] = decide(adjust(stats[t], "two_sided"), config.alpha)[1]
        except FlipScoreError as exc:
            log.debug("flip tests failed (n=%d, rep=%d): %s", n, rep, exc)
            out.update(dict.fromkeys(flip_tests))

    wald_tests = [t for t in ("parametric", "sandwich") if t in config.tests]
    if wald_tests:
        z_crit = float(norm.isf(config.alpha / 2.0))
        try:
            full = fit_glm(data.y, np.column_stack([data.X, data.Z]), np.zeros(n), family)
        except FlipScoreError as exc:
            log.debug("full fit failed (n=%d, rep=%d): %s", n, rep, exc)
            full = None
        for t in wald_tests:
            if full is None:
                out[t] = None
                continue
            kind = "model_based" if t == "parametric" else "sandwich_hc0"
            try:
                cov, _ = full_model_covariance(data, full, kind)
                se = math.sqrt(cov[0, 0])
                z = (full.coef[0] - data.beta0[0]) / se
                out[t] = bool(abs(z) > z_crit)
            except (FlipScoreError, ValueError) as exc:
                log.debug("%s failed (n=%d, rep=%d): %s", t, n, rep, exc)
                out[t] = None
    return out


def _run_chunk(args):
    config, n, start, stop = args
    counts = {t: [0, 0, 0] for t in config.tests}  # rejections, failures, successes
    t0 = time.perf_counter()
    with threadpool_limits(1):
        for rep in range(start, stop):
            for t, decision in run_replicate(config, n, rep).items():
                if decision is None:
                    counts[t][1] += 1
                else:
                    counts[t][2] += 1
                    counts[t][0] += int(decision)
    return n, counts, time.perf_counter() - t0


# -- aggregation ---------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    scenario: str
    test: str
    n: int
    replications: int
    failures: int
    reject_rate: float
    mc_se: float
    seed: int
    runtime_s: float | None = None


CSV_COLUMNS = tuple(SummaryRow.__dataclass_fields__)


@dataclass
class SimulationSummary:
    """Per (scenario, test, n) rejection rates.

    ``replications`` in each row counts the successful replicates, which
    form the denominator of ``reject_rate``; ``failures`` counts the
    excluded ones.
    """

    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def cell(self, scenario, test, n):
        for row in self.rows:
            if (row.scenario, row.test, row.n) == (scenario, test, n):
                return row
        raise KeyError((scenario, test, n))

    def rate(self, scenario, test, n):
        return self.cell(scenario, test, n).reject_rate

    @property
    def invalid(self):
        """Scenarios with any cell whose failure rate exceeds 5 %."""
        bad = []
        for row in self.rows:
            total = row.replications + row.failures
            if total and row.failures / total > MAX_FAILURE_RATE and row.scenario not in bad:
                bad.append(row.scenario)
        return bad

    def extend(self, other):
        self.rows.extend(other.rows)
        self.metadata.setdefault("scenarios", {}).update(other.metadata.get("scenarios", {}))
        return self


def default_threads():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be positive")
    return value


def _chunks(config, chunk_size):
    for n in config.n_grid:
        for start in range(0, config.replications, chunk_size):
            yield config, n, start, min(start + chunk_size, config.replications)


def run_scenario(config, threads=None, chunk_size=50):
    """Run every replicate of ``config``; returns a :class:`SimulationSummary`.

    ``threads`` worker processes share the replicates; ``1`` runs in
    process. Output is identical for any worker count.
    """
    threads = default_threads() if threads is None else int(threads)
    if threads < 1:
        raise ConfigurationError("threads must be positive")
    tasks = list(_chunks(config, chunk_size))
    totals = {n: {t: [0, 0, 0] for t in config.tests} for n in config.n_grid}
    seconds = dict.fromkeys(config.n_grid, 0.0)

    def absorb(result):
        n, counts, secs = result
        seconds[n] += secs
        for t, c in counts.items():
            for k in range(3):
                totals[n][t][k] += c[k]

    if threads == 1:
        for task in tasks:
            absorb(_run_chunk(task))
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for result in pool.map(_run_chunk, tasks):
                absorb(result)

    rows = []
    for t in config.tests:
        for n in config.n_grid:
            rej, fail, ok = totals[n][t]
            rate = rej / ok if ok else float("nan")
            se = math.sqrt(rate * (1 - rate) / ok) if ok else float("nan")
            rows.append(SummaryRow(config.name, t, n, ok, fail, rate, se, config.master_seed, seconds[n]))
    meta = {
        "scenarios": {
            config.name: {
                **asdict(config),
                "n_grid": list(config.n_grid),
                "tests": list(config.tests),
                "dgp_params": config.dgp_params,
                "fit_family": str(config.fit_family),
                "covariate_correlation": covariate_covariance().tolist(),
                "flip_variant_ties": "ties with the observed statistic count toward the p-value",
                "wald": {"parametric": "model_based, gaussian sigma2 = RSS/(n-p)", "sandwich": "HC0"},
            }
        }
    }
    summary = SimulationSummary(rows, meta)
    for name in summary.invalid:
        log.warning("scenario %s: failure rate above %.0f%% in some cell", name, 100 * MAX_FAILURE_RATE)
    return summary


def run_scenarios(configs, threads=None):
    summary = SimulationSummary(metadata={"scenarios": {}})
    for config in configs:
        summary.extend(run_scenario(config, threads=threads))
    return summary


def full_scale(config):
    """Same scenario at full scale: 5000 replicates on all six sample sizes."""
    return replace(config, replications=5000, n_grid=FULL_N_GRID)
