"""Oracle-equivalence and identity checks behind ``flipscore selfcheck``.

Every check compares a fast code path with the dense reference module or
verifies an exact algebraic identity on seeded random inputs.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from . import reference as ref
from .families import Family
from .glm import DesignData, fit_null
from .multivariate import flip_covariances, standardized_score_vector
from .rng import FlipPlan
from .score import build_projection, effective_score, flip_statistics, flip_variances


@dataclass(frozen=True)
class CheckResult:
    check_id: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _problem(seed, n=40, q=3, d=1, family="poisson"):
    rng = np.random.default_rng(seed)
    Z = np.column_stack([np.ones(n), rng.standard_normal((n, q - 1))])
    z1 = Z[:, 1] if q > 1 else np.zeros(n)
    X = rng.standard_normal((n, d)) + 0.3 * z1[:, None]
    if family == "poisson":
        y = rng.poisson(np.exp(0.5 + 0.3 * z1)).astype(float)
        fam = Family.poisson()
    elif family == "binomial":
        y = (rng.random(n) < 0.4).astype(float)
        fam = Family.binomial()
    else:
        y = z1 + rng.standard_normal(n)
        fam = Family.gaussian()
    data = DesignData(y, X, Z)
    return data, fit_null(data, fam)


def _rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


class SelfCheck:
    """Runs the check suite.

    ``perturb_projection`` is a test hook: a callable applied to every
    projection before it is checked, used to confirm that a corrupted
    factorization is caught.
    """

    def __init__(self, perturb_projection=None):
        self.perturb = perturb_projection

    def projection(self, fit, data):
        proj = build_projection(fit, data)
        return self.perturb(proj) if self.perturb else proj

    # each check returns (passed, detail)

    def check_flip_sandwich_identity(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            C = rng.integers(-50, 51, size=(5, 5))
            if not np.array_equal(ref.flip_sandwich_sum(C), 32 * np.diag(np.diag(C))):
                return False, "sum_F F C F != 2^5 diag(C)"
        return True, "20 integer 5x5 matrices, exact"

    def check_similarity_eigenvalues(self):
        rng = np.random.default_rng(12)
        C = rng.standard_normal((6, 6))
        G = rng.standard_normal((6, 6)) + 3 * np.eye(6)
        a = np.sort_complex(np.linalg.eigvals(C))
        b = np.sort_complex(np.linalg.eigvals(np.linalg.solve(G, C @ G)))
        err = float(np.max(np.abs(a - b)))
        return err <= 1e-8, f"max eigenvalue difference {err:.2e}"

    def check_projection_dense(self):
        worst = 0.0
        for seed, (n, q) in enumerate([(10, 3), (30, 1), (60, 5)]):
            data, fit = _problem(100 + seed, n=n, q=q)
            proj = self.projection(fit, data)
            H = ref.dense_hat(fit.w_diag, data.Z)
            worst = max(worst, float(np.max(np.abs(proj.U @ proj.U.T - H))))
        return worst <= 1e-10, f"max |UU' - H| = {worst:.2e}"

    def check_projection_idempotent(self):
        worst = 0.0
        for seed, (n, q) in enumerate([(10, 3), (30, 1), (60, 5)]):
            data, fit = _problem(200 + seed, n=n, q=q)
            proj = self.projection(fit, data)
            P = proj.U @ proj.U.T
            worst = max(worst, float(np.max(np.abs(P @ P - P))), float(np.max(np.abs(P - P.T))),
                        abs(float(np.trace(P)) - q))
        return worst <= 1e-8, f"idempotence/symmetry/trace error {worst:.2e}"

    def check_projection_orthogonal(self):
        worst = 0.0
        for seed in range(3):
            data, fit = _problem(300 + seed, n=50, q=4, d=2)
            proj = self.projection(fit, data)
            ua = proj.U.T @ proj.a_cols
            worst = max(worst, float(np.max(np.abs(ua) / np.sqrt(proj.a_norm2))))
        return worst <= 1e-8, f"max |U'a| / ||a|| = {worst:.2e}"

    def check_effective_score_dense(self):
        worst = 0.0
        for seed, fam in enumerate(["poisson", "binomial", "gaussian"]):
            data, fit = _problem(400 + seed, n=40, q=3, d=2, family=fam)
            proj = self.projection(fit, data)
            plan = FlipPlan(n=data.n, g=20, seed=seed)
            for f in plan.flips:
                worst = max(worst, _rel(effective_score(proj, fit, data, f),
                                        ref.dense_effective_score(fit, data, f)))
        return worst <= 1e-9, f"max relative error {worst:.2e}"

    def check_flip_variance_dense(self):
        worst = 0.0
        for seed, (n, q) in enumerate([(10, 1), (50, 3), (200, 8)]):
            data, fit = _problem(500 + seed, n=n, q=q, d=2)
            proj = self.projection(fit, data)
            flips = FlipPlan(n=n, g=100, seed=seed).flips
            fast = flip_covariances(proj, flips)
            for k in range(0, 100, 7):
                worst = max(worst, _rel(fast[k], ref.dense_flip_variance(fit, data, flips[k])))
        return worst <= 1e-10, f"max relative error {worst:.2e}"

    def check_exhaustive_mean_zero(self):
        data, fit = _problem(600, n=10, q=2)
        proj = build_projection(fit, data)
        plan = FlipPlan.from_array(ref.enumerate_flips(10))
        stats, _ = flip_statistics(proj, fit.pearson(data.y), plan, "effective")
        mean = float(np.abs(stats.mean(axis=0)).max())
        scale = float(np.abs(stats).max())
        return mean <= 1e-14 * scale * 1024, f"|mean S(F)| over 1024 flips = {mean:.2e}"

    def check_variance_ordering(self):
        data, fit = _problem(700, n=50, q=3, family="gaussian")
        proj = build_projection(fit, data)
        var = flip_variances(proj, FlipPlan(n=50, g=2001, seed=7).flips[1:])[:, 0]
        gap = proj.a_norm2[0] / 50 - var
        ok = gap.min() >= -1e-12 and np.mean(gap > 0) >= 0.99
        return bool(ok), f"min gap {gap.min():.2e}, strict in {np.mean(gap > 0):.1%} of flips"

    def check_unit_plugin_variance(self):
        data, fit = _problem(800, n=60, q=3)
        proj = build_projection(fit, data)
        flips = FlipPlan(n=60, g=50, seed=8).flips
        var = flip_variances(proj, flips)[:, 0]
        # dense plug-in variance of S(F) / sqrt(var_F) must be exactly 1
        dense = np.array([ref.dense_flip_variance(fit, data, f)[0, 0] for f in flips])
        err = float(np.max(np.abs(dense / var - 1.0)))
        return err <= 1e-10, f"max |var(S*(F)) - 1| = {err:.2e}"

    def check_scale_decision_invariance(self):
        # Rescaling the working variance by c multiplies every standardized
        # statistic by c^(-1/2): the ordering, p-value and decision stay put.
        worst, same = 0.0, True
        for seed, fam in enumerate(["poisson", "binomial", "gaussian"]):
            data, fit = _problem(900 + seed, n=40, family=fam)
            plan = FlipPlan(n=40, g=200, seed=seed)
            base, _ = flip_statistics(build_projection(fit, data), fit.pearson(data.y), plan)
            for c in (0.1, 7.0, 1000.0):
                fc = fit.rescaled(c)
                st, _ = flip_statistics(build_projection(fc, data), fc.pearson(data.y), plan)
                worst = max(worst, _rel(st * np.sqrt(c), base))
                same &= np.array_equal(np.argsort(st[:, 0], kind="stable"),
                                       np.argsort(base[:, 0], kind="stable"))
        return worst <= 1e-9 and bool(same), f"max relative error after c^(1/2) rescale {worst:.2e}"

    def check_multivariate_identity_covariance(self):
        data, fit = _problem(1000, n=80, q=3, d=3)
        proj = self.projection(fit, data)
        ident = np.ones(data.n)
        cov = flip_covariances(proj, ident[None])[0]
        lam, Q = np.linalg.eigh(cov)
        root = (Q / np.sqrt(lam)) @ Q.T
        err = float(np.max(np.abs(root @ cov @ root - np.eye(3))))
        s1 = standardized_score_vector(proj, fit, data, ident)
        s2 = root @ effective_score(proj, fit, data, ident)
        err = max(err, _rel(s1, s2))
        return err <= 1e-8, f"max |cov(S*(I)) - I| = {err:.2e}"

    def check_flip_stream_counter(self):
        plan = FlipPlan(n=300, g=40, seed=123)
        full = plan.flips
        ok = all(np.array_equal(full[j], plan.flip(j)) for j in (0, 1, 17, 39))
        ok &= np.array_equal(full[10:25], plan.block(10, 25))
        ok &= bool(np.all(full[0] == 1))
        return bool(ok), "single-flip and block regeneration agree"

    def checks(self):
        return [
            ("flip_sandwich_identity", self.check_flip_sandwich_identity),
            ("similarity_eigenvalues", self.check_similarity_eigenvalues),
            ("projection_dense_match", self.check_projection_dense),
            ("projection_idempotent", self.check_projection_idempotent),
            ("projection_orthogonality", self.check_projection_orthogonal),
            ("effective_score_dense", self.check_effective_score_dense),
            ("flip_variance_dense", self.check_flip_variance_dense),
            ("exhaustive_mean_zero", self.check_exhaustive_mean_zero),
            ("variance_ordering", self.check_variance_ordering),
            ("unit_plugin_variance", self.check_unit_plugin_variance),
            ("scale_decision_invariance", self.check_scale_decision_invariance),
            ("multivariate_identity_covariance", self.check_multivariate_identity_covariance),
            ("flip_stream_counter", self.check_flip_stream_counter),
        ]

    def run(self):
        results = []
        for check_id, fn in self.checks():
            t0 = time.perf_counter()
            try:
                passed, detail = fn()
            except Exception as exc:  # a crash is a failed check, not an abort
                passed, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(CheckResult(check_id, bool(passed), detail, time.perf_counter() - t0))
        return results


def perturb_u(proj, eps=1e-6, seed=0):
    """Negative-control hook: nudge ``U`` off the nuisance column space."""
    rng = np.random.default_rng(seed)
    U = proj.U + eps * rng.standard_normal(proj.U.shape)
    return dataclasses.replace(proj, U=U)


def run_selfcheck(perturb_projection=None):
    return SelfCheck(perturb_projection).run()
