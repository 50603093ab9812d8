"""Command-line interface: ``flipscore {test,simulate,selfcheck,report}``.

Exit codes: 0 ok, 2 usage, 3 data, 4 fit non-convergence, 5 degenerate
statistic, 6 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import CollinearityError, ConfigurationError, DataError, FlipScoreError
from .families import Family
from .glm import DesignData, fit_null
from .multivariate import multivariate_test_from_fit
from .rng import FlipPlan
from .score import ALTERNATIVES, VARIANTS, build_projection, univariate_test_from_fit
from .simulation import (
    DGPS,
    TESTS,
    default_scenario,
    default_threads,
    load_scenarios,
    full_scale,
    run_scenario,
)

log = logging.getLogger("flipscore")

EXIT_OK, EXIT_USAGE, EXIT_INTERNAL = 0, 2, 6
DEFAULT_FLIPS = 5000
INTERCEPT = "(intercept)"


def _round15(obj):
    """Round every float to 15 significant digits for stable output."""
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None
        return float(f"{obj:.15g}")
    if isinstance(obj, np.floating):
        return _round15(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _round15(obj.tolist())
    if isinstance(obj, dict):
        return {k: _round15(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round15(v) for v in obj]
    return obj


def _split(values):
    out = []
    for v in values or []:
        out.extend(p.strip() for p in v.split(",") if p.strip())
    return out


# -- data ingestion --------------------------------------------------------------


def read_table(path):
    """Numeric CSV with a header row; returns ``{column: array}``."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            if len(set(header)) != len(header):
                raise DataError(f"{path}: duplicate column names")
            rows = []
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != len(header):
                    raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
                try:
                    rows.append([float(v) for v in rec])
                except ValueError:
                    bad = next(v for v in rec if not _is_float(v))
                    raise DataError(
                        f"{path}:{lineno}: non-numeric or missing value {bad!r}"
                    ) from None
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not UTF-8 ({exc})") from exc
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.asarray(rows)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite values are not allowed")
    return {h: arr[:, j] for j, h in enumerate(header)}


def _is_float(v):
    try:
        float(v)
    except ValueError:
        return False
    return True


def build_design(table, response, targets, nuisance, intercept=True, beta0=None):
    names = [response, *targets, *nuisance]
    missing = [c for c in names if c not in table]
    if missing:
        raise DataError(f"column(s) not found: {', '.join(missing)} (available: {', '.join(table)})")
    if len(set(names)) != len(names):
        raise DataError("response, target and nuisance columns must be distinct")
    if not targets:
        raise DataError("at least one target column is required")
    n = table[response].size
    X = np.column_stack([table[c] for c in targets])
    zcols = ([np.ones(n)] if intercept else []) + [table[c] for c in nuisance]
    Z = np.column_stack(zcols) if zcols else np.empty((n, 0))
    znames = ([INTERCEPT] if intercept else []) + list(nuisance)
    return DesignData(table[response], X, Z, beta0), znames


# -- subcommands ------------------------------------------------------------------


def _family(args):
    if args.family == "negative_binomial":
        return Family("negative_binomial", args.link, args.dispersion)
    if args.dispersion is not None:
        raise ConfigurationError("--dispersion only applies to the negative_binomial family")
    return Family(args.family, args.link)


def cmd_test(args):
    targets = _split(args.target)
    nuisance = _split(args.nuisance)
    beta0 = [float(b) for b in _split(args.beta0)] or None
    table = read_table(args.data)
    data, znames = build_design(table, args.response, targets, nuisance, not args.no_intercept, beta0)
    family = _family(args)
    if args.g < 2:
        raise ConfigurationError("--g must be at least 2")
    plan = FlipPlan(n=data.n, g=args.g, seed=args.seed)
    with threadpool_limits(args.threads):
        fit = fit_null(data, family)
        try:
            proj = build_projection(fit, data)
        except CollinearityError as exc:
            names = [targets[j] for j in exc.columns]
            raise CollinearityError(
                f"target column(s) {', '.join(names)} lie in the nuisance span of "
                f"{', '.join(znames)}"
            ) from exc
        if data.d == 1:
            res = univariate_test_from_fit(fit, proj, data, plan, args.variant, args.alternative, args.alpha)
            kind = "univariate"
        else:
            if args.variant != "standardized" or args.alternative != "two_sided":
                log.warning("d > 1: using the standardized two-sided combined test")
            res = multivariate_test_from_fit(fit, proj, data, plan, args.combine, args.alpha)
            kind = "multivariate"
    lev = proj.hat_diag()
    report = {
        "test": {
            "kind": kind,
            "variant": res.variant,
            "alternative": res.alternative,
            "alpha": res.alpha,
            "g": res.g,
            "seed": args.seed,
            "stat_observed": res.stat_observed,
            "p_value": res.p_value,
            "reject": res.reject,
        },
        "data": {
            "path": str(args.data),
            "n": data.n,
            "response": args.response,
            "targets": targets,
            "beta0": data.beta0,
            "nuisance": znames,
        },
        "fit": {
            "family": str(fit.family),
            "iterations": fit.iterations,
            "converged": fit.converged,
            "phi_hat": fit.phi_hat,
            "deviance": fit.deviance,
            "clamped": fit.clamped,
            "gamma_hat": dict(zip(znames, fit.gamma_hat.tolist())),
        },
        "diagnostics": {**res.diagnostics, "max_leverage": float(lev.max()) if lev.size else 0.0},
    }
    if args.include_flips:
        report["stats_flipped"] = res.stats_flipped
    report = _round15(report)
    if args.output == "json":
        print(json.dumps(report, indent=2))
    else:
        t, f = report["test"], report["fit"]
        print(f"sign-flip score test ({t['kind']}, {t['variant']}, {t['alternative']})")
        print(f"  targets      : {', '.join(targets)}  (beta0 = {report['data']['beta0']})")
        print(f"  nuisance     : {', '.join(znames) or '-'}")
        print(f"  family       : {f['family']}  (IRLS iterations {f['iterations']}, phi_hat {f['phi_hat']:.6g})")
        print(f"  statistic    : {t['stat_observed']:.6g}")
        print(f"  p-value      : {t['p_value']:.6g}  (g = {t['g']}, seed = {t['seed']})")
        print(f"  decision     : {'reject' if t['reject'] else 'do not reject'} H0 at alpha = {t['alpha']}")
    return EXIT_OK


def _scenarios_from_args(args):
    if args.scenario_file:
        configs = load_scenarios(args.scenario_file)
        if args.scenario:
            wanted = set(_split(args.scenario))
            configs = [c for c in configs if c.name in wanted]
            if not configs:
                raise ConfigurationError(f"none of {sorted(wanted)} in {args.scenario_file}")
    else:
        names = _split(args.scenario) or list(DGPS)
        configs = [default_scenario(name) for name in names]
    out = []
    for c in configs:
        if args.full_scale:
            c = full_scale(c)
        overrides = {}
        if args.reps is not None:
            overrides["replications"] = args.reps
        if args.n:
            overrides["n_grid"] = tuple(int(v) for v in _split(args.n))
        if args.tests:
            overrides["tests"] = tuple(_split(args.tests))
        if args.seed is not None:
            overrides["master_seed"] = args.seed
        if args.g is not None:
            overrides["g_flips"] = args.g
        if args.alpha is not None:
            overrides["alpha"] = args.alpha
        out.append(replace(c, **overrides) if overrides else c)
    return out


def cmd_simulate(args):
    from .report import export_summary
    from .simulation import SimulationSummary

    configs = _scenarios_from_args(args)
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    summary = SimulationSummary(metadata={"scenarios": {}})
    for config in configs:
        log.info("running %s (%d reps, n = %s)", config.name, config.replications, list(config.n_grid))
        summary.extend(run_scenario(config, threads=args.threads))
    path = outdir / args.output_name
    export_summary(summary, path, "csv", plot=args.plot, record_runtime=args.record_runtime)
    _print_table(summary.rows)
    for name in summary.invalid:
        print(f"warning: scenario {name} flagged invalid (failure rate > 5% in some cell)", file=sys.stderr)
    print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


def _print_table(rows):
    print("scenario\ttest\tn\treplications\tfailures\treject_rate\tmc_se")
    for r in rows:
        print(f"{r.scenario}\t{r.test}\t{r.n}\t{r.replications}\t{r.failures}\t{r.reject_rate:.4f}\t{r.mc_se:.4f}")


def cmd_selfcheck(args):
    from .selfcheck import perturb_u, run_selfcheck

    perturb = perturb_u if args.inject_fault == "projection" else None
    results = run_selfcheck(perturb)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.check_id}: {r.detail}")
    failed = [r.check_id for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else 1


def cmd_report(args):
    from .report import plot_summary, read_csv

    summary = read_csv(args.summary)
    outdir = Path(args.out_dir) if args.out_dir else Path(args.summary).parent
    outdir.mkdir(parents=True, exist_ok=True)
    meta_path = Path(args.summary).with_suffix(".meta.json")
    if meta_path.exists():
        try:
            summary.metadata = json.loads(meta_path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            log.warning("ignoring unreadable metadata %s", meta_path)
    _print_table(summary.rows)
    for p in plot_summary(summary, outdir, args.format):
        print(f"wrote {p}", file=sys.stderr)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="flipscore", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("test", help="sign-flip score test on a CSV dataset")
    t.add_argument("data", type=Path, help="CSV file with a header row")
    t.add_argument("-y", "--response", required=True)
    t.add_argument("-x", "--target", action="append", required=True,
                   help="target column(s); repeat or comma-separate for d > 1")
    t.add_argument("-z", "--nuisance", action="append", default=[], help="nuisance column(s)")
    t.add_argument("--no-intercept", action="store_true", help="do not add an intercept to the nuisance design")
    t.add_argument("--family", choices=["gaussian", "poisson", "binomial", "negative_binomial"], default="gaussian")
    t.add_argument("--link", choices=["identity", "log", "logit"], default=None)
    t.add_argument("--dispersion", type=float, default=None,
                   help="fixed NB dispersion (estimated when omitted)")
    t.add_argument("--variant", choices=VARIANTS, default="standardized")
    t.add_argument("--alternative", choices=ALTERNATIVES, default="two_sided")
    t.add_argument("--alpha", type=float, default=0.05)
    t.add_argument("--beta0", action="append", default=[], help="hypothesized target value(s), default 0")
    t.add_argument("--combine", choices=["identity", "inverse_score_covariance"], default="identity",
                   help="combining matrix for d > 1")
    t.add_argument("-g", "--g", type=int, default=DEFAULT_FLIPS, help="number of flips incl. the identity")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--threads", type=int, default=None)
    t.add_argument("--output", choices=["text", "json"], default="text")
    t.add_argument("--include-flips", action="store_true", help="add every flipped statistic to the JSON")
    t.set_defaults(func=cmd_test)

    s = sub.add_parser("simulate", help="run Monte Carlo scenarios")
    s.add_argument("--scenario", action="append", default=[],
                   help=f"scenario name(s); built-in: {', '.join(DGPS)}")
    s.add_argument("--scenario-file", type=Path, help="YAML file with scenario blocks")
    s.add_argument("--reps", type=int)
    s.add_argument("--n", action="append", default=[], help="sample size(s), e.g. --n 25,50,100")
    s.add_argument("--tests", help=f"comma list from {', '.join(TESTS)}")
    s.add_argument("--seed", type=int)
    s.add_argument("--g", type=int, help="flips per replicate")
    s.add_argument("--alpha", type=float)
    s.add_argument("--full-scale", action="store_true",
                   help="5000 replicates on n = 25, 50, 100, 200, 500, 1000")
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--out-dir", default="results")
    s.add_argument("--output-name", default="summary.csv")
    s.add_argument("--plot", action="store_true", help="write an SVG figure per scenario")
    s.add_argument("--record-runtime", action="store_true",
                   help="fill runtime_s in the CSV (makes the file run-dependent)")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("selfcheck", help="oracle-equivalence and identity checks")
    c.add_argument("--inject-fault", choices=["projection"], help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_selfcheck)

    r = sub.add_parser("report", help="render figures from a summary CSV")
    r.add_argument("summary", type=Path)
    r.add_argument("--out-dir", default=None)
    r.add_argument("--format", choices=["svg", "pdf", "png"], default="svg")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        if getattr(args, "threads", None) is None and hasattr(args, "threads"):
            args.threads = default_threads()
        return args.func(args)
    except FlipScoreError as exc:
        payload = {"error": {"category": exc.category, "type": type(exc).__name__, "message": str(exc)}}
        if getattr(args, "output", None) == "json":
            print(json.dumps(payload, indent=2))
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # pragma: no cover - last resort
        print(f"error [internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
