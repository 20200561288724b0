"""Numerical laboratory for high-dimensional gradient flows on random data.

Submodules:
    design      random design matrices and population laws
    losses      loss models, label conditioning, regularizer paths
    flow        finite-dimensional Euler simulator and empirical observables
    kernels     block kernels over time grids, Gaussian sampling, CSV round trip
    dmft        discrete-time effective-process solver (forward induction)
    amp         iteration-based state-evolution oracle with shared noise streams
    stationary  long-time fixed-point solver, proximal map, residual checks
    phi         envelope bounds dominating kernel growth
    metrics     Wasserstein distances between sample clouds, kernel sup norm
    cli         experiment orchestration, artifact persistence, plot data
    report      matplotlib figure rendering for run artifacts

Submodules load lazily so that thread limits can be set before numpy is
imported by the command line entry point.
"""
from __future__ import annotations

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "design",
    "losses",
    "flow",
    "kernels",
    "dmft",
    "amp",
    "stationary",
    "phi",
    "metrics",
    "mc",
    "rng",
    "cli",
    "report",
)

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name: str):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
