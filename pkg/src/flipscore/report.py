"""CSV/JSON export of simulation summaries and their figures."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from .errors import DataError, FlipScoreError
from .simulation import CSV_COLUMNS, SimulationSummary, SummaryRow


class ExportError(FlipScoreError, OSError):
    """Failure writing a report file; the message names the path."""

    exit_code = 3
    category = "io"


def fmt_float(x):
    """15 significant digits; NaN and missing values become empty cells."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.15g}"


def write_csv(summary, path, record_runtime=False):
    """One row per scenario x test x n.

    ``runtime_s`` is left empty unless ``record_runtime`` is set, which
    keeps the file a pure function of the configuration and seed.
    """
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for r in summary.rows:
                writer.writerow([
                    r.scenario,
                    r.test,
                    r.n,
                    r.replications,
                    r.failures,
                    fmt_float(r.reject_rate),
                    fmt_float(r.mc_se),
                    r.seed,
                    fmt_float(r.runtime_s) if record_runtime else "",
                ])
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path):
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise DataError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
            rows = [
                SummaryRow(
                    scenario=rec["scenario"],
                    test=rec["test"],
                    n=int(rec["n"]),
                    replications=int(rec["replications"]),
                    failures=int(rec["failures"]),
                    reject_rate=float(rec["reject_rate"]) if rec["reject_rate"] else math.nan,
                    mc_se=float(rec["mc_se"]) if rec["mc_se"] else math.nan,
                    seed=int(rec["seed"]),
                    runtime_s=float(rec["runtime_s"]) if rec["runtime_s"] else None,
                )
                for rec in reader
            ]
    except OSError as exc:
        raise ExportError(f"cannot read {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed summary row ({exc})") from exc
    return SimulationSummary(rows)


def write_metadata(summary, path):
    path = Path(path)
    scenarios = summary.metadata.get("scenarios", {})
    runtime = {}
    for r in summary.rows:
        runtime.setdefault(r.scenario, {})[str(r.n)] = r.runtime_s
    doc = {"scenarios": scenarios, "invalid": summary.invalid, "runtime_s": runtime}
    try:
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc
    return path


def plot_summary(summary, outdir, fmt="svg"):
    """One rejection-rate figure per scenario; returns the file paths."""
    from .plotting import rejection_figure, save_figure

    outdir = Path(outdir)
    paths = []
    by_scenario = {}
    for r in summary.rows:
        by_scenario.setdefault(r.scenario, []).append(r)
    for scenario, rows in by_scenario.items():
        meta = summary.metadata.get("scenarios", {}).get(scenario, {})
        alpha = meta.get("alpha", 0.05)
        beta = (meta.get("dgp_params") or {}).get("beta", 0.0)
        ylabel = "power" if beta else "rejection rate"
        path = outdir / f"{scenario}.{fmt}"
        try:
            save_figure(rejection_figure(rows, scenario, alpha, ylabel), path)
        except OSError as exc:
            raise ExportError(f"cannot write {path}: {exc}") from exc
        paths.append(path)
    return paths


def export_summary(summary, path, format="csv", plot=False, record_runtime=False):
    """Write ``summary`` to ``path``.

    ``format`` is ``csv`` (plus a ``.meta.json`` sidecar with the design
    constants and timings) or ``json``. With ``plot`` an SVG figure per
    scenario is written next to the main file.
    """
    path = Path(path)
    if not path.parent.exists():
        raise ExportError(f"cannot write {path}: directory {path.parent} does not exist")
    written = []
    if format == "csv":
        written.append(write_csv(summary, path, record_runtime))
        written.append(write_metadata(summary, path.with_suffix(".meta.json")))
    elif format == "json":
        doc = {
            "rows": [
                {c: getattr(r, c) for c in CSV_COLUMNS} for r in summary.rows
            ],
            "metadata": summary.metadata,
            "invalid": summary.invalid,
        }
        try:
            path.write_text(json.dumps(doc, indent=2, default=str) + "\n", encoding="utf-8")
        except OSError as exc:
            raise ExportError(f"cannot write {path}: {exc}") from exc
        written.append(path)
    else:
        raise DataError(f"unknown export format {format!r}; use csv or json")
    if plot:
        written.extend(plot_summary(summary, path.parent))
    return written
