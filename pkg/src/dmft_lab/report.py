"""Figure rendering for experiment outputs.

Everything goes through the Agg backend so runs behave the same on headless
machines.  Functions take the already-loaded series (the CLI writes matching
CSVs next to each figure) and return the path they saved.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_SAVEFIG = {"dpi": 130, "bbox_inches": "tight"}


def _new_axes(xlabel: str, ylabel: str, title: str):
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    return fig, ax


def fig_ctheta_diag(series, path: str) -> str:
    """Overlay the equal-time kernel norm against flow time, one line per source.

    series: iterable of (label, times, values).
    """
    fig, ax = _new_axes("time", "||C(t,t)||", "equal-time parameter covariance")
    for label, times, values in series:
        style = "--" if label in ("dmft", "amp") else "-"
        ax.plot(times, values, style, label=label, linewidth=1.4)
    ax.legend(fontsize=8)
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return path


def fig_qq(pairs, path: str) -> str:
    """Quantile-quantile scatter of empirical vs solver marginals per time.

    pairs: iterable of (time, levels, empirical_quantiles, solver_quantiles).
    """
    fig, ax = _new_axes("solver quantile", "empirical quantile", "marginal QQ")
    lo, hi = None, None
    for t, _levels, eq, rq in pairs:
        ax.plot(rq, eq, ".", markersize=3, label=f"t={t:g}")
        qmin = min(float(eq.min()), float(rq.min()))
        qmax = max(float(eq.max()), float(rq.max()))
        lo = qmin if lo is None else min(lo, qmin)
        hi = qmax if hi is None else max(hi, qmax)
    if lo is not None:
        ax.plot([lo, hi], [lo, hi], "k-", linewidth=0.8, alpha=0.6)
    ax.legend(fontsize=8)
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return path


def fig_w2_vs_d(rows, path: str) -> str:
    """Transport distance against dimension, one line per observation time.

    rows: dicts with keys "time", "d", "value".
    """
    fig, ax = _new_axes("d", "sliced W2", "marginal distance vs dimension")
    times = sorted({r["time"] for r in rows})
    for t in times:
        pts = sorted((r["d"], r["value"]) for r in rows if r["time"] == t)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=f"t={t:g}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return path


def fig_gamma(times, values, path: str) -> str:
    """Instantaneous feedback coefficient along the run (flattened entries)."""
    fig, ax = _new_axes("time", "Gamma(t)", "loss curvature feedback")
    ax.plot(times, values, "-", linewidth=1.2)
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return path
