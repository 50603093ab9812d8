"""Matplotlib defaults and rejection-rate figures."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Line styles mirror the usual convention for the four tests.
TEST_STYLES = {
    "standardized": {"linestyle": "-", "marker": "o"},
    "effective": {"linestyle": "--", "marker": "s"},
    "parametric": {"linestyle": "-.", "marker": "^"},
    "sandwich": {"linestyle": ":", "marker": "v"},
}

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.fonttype": "none",
    "svg.hashsalt": "flipscore",
}


def figsize(scale=1.0, ratio=None):
    width = 5.0 * scale
    ratio = (math.sqrt(5.0) - 1.0) / 2.0 if ratio is None else ratio
    return width, width * ratio


def rejection_figure(rows, scenario, alpha=0.05, ylabel="rejection rate"):
    """Rejection rate against sample size (log axis), one line per test,
    with a dotted reference line at ``alpha``."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize())
        tests = [t for t in TEST_STYLES if any(r.test == t for r in rows)]
        for test in tests:
            pts = sorted((r.n, r.reject_rate) for r in rows if r.test == test)
            if not pts:
                continue
            ns, rates = zip(*pts)
            ax.plot(ns, rates, color="black", label=test, **TEST_STYLES[test])
        if ylabel == "rejection rate":
            ax.axhline(alpha, color="grey", linewidth=0.8, linestyle=(0, (1, 3)))
        ax.set_xscale("log")
        ns = sorted({r.n for r in rows})
        ax.set_xticks(ns)
        ax.set_xticklabels([str(n) for n in ns])
        ax.minorticks_off()
        ax.set_xlabel("sample size n")
        ax.set_ylabel(ylabel)
        ax.set_title(scenario)
        ax.legend(frameon=False)
        fig.tight_layout()
    return fig


def save_figure(fig, path):
    """Write ``fig`` without a timestamp so repeated runs give the same bytes."""
    with plt.rc_context(RC):
        fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
