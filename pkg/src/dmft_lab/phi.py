"""A-priori growth envelopes for the solver kernels.

A coupled scalar system integrated forward in time: two response envelopes
(parameter side, drift side) and two covariance envelopes.  The drift-side
quantities are slaved (no time derivative of their own), the parameter-side
ones evolve by forward Euler; the covariance envelope is integrated in
square-root form for stability.  Envelopes are nondecreasing by construction
and dominate the corresponding kernel norms on the knot grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import TimeGrid


@dataclass(frozen=True)
class PhiParams:
    """Constants of the envelope system.

    M_ell bounds the loss drift Lipschitz constant, M_lambda the regularizer
    path norm, M_init_noise the larger of the initial second moment and the
    drift second moment at the origin.  phi_Rt0 must exceed 1 and phi_Ct0
    must exceed M_init_noise, otherwise the envelopes cannot dominate even
    at time zero.
    """

    M_ell: float
    M_lambda: float
    M_init_noise: float
    delta: float
    k: int
    phi_Rt0: float = 1.5
    phi_Ct0: float | None = None  # default: 1.5 * max(M_init_noise, 1)

    def resolved_ct0(self) -> float:
        if self.phi_Ct0 is not None:
            return self.phi_Ct0
        return 1.5 * max(self.M_init_noise, 1.0)


@dataclass
class PhiBounds:
    grid: TimeGrid
    phi_Rt: np.ndarray  # (m+1,)
    phi_Rl: np.ndarray
    phi_Ct: np.ndarray
    phi_Cl: np.ndarray
    params: PhiParams


def phi_bounds(params: PhiParams, grid: TimeGrid) -> PhiBounds:
    if not params.phi_Rt0 > 1.0:
        raise ValueError("phi_Rt0 must exceed 1")
    ct0 = params.resolved_ct0()
    if not ct0 > params.M_init_noise:
        raise ValueError("phi_Ct0 must exceed the init/noise second-moment bound")
    ml, mlam, mz = params.M_ell, params.M_lambda, params.M_init_noise
    delta, k = params.delta, params.k
    eta, m = grid.eta, grid.m

    rt = np.empty(m + 1)
    rl = np.empty(m + 1)
    ct = np.empty(m + 1)
    cl = np.empty(m + 1)
    sq = np.empty(m + 1)  # sqrt of ct, integrated directly
    rt[0] = params.phi_Rt0
    ct[0] = ct0
    sq[0] = np.sqrt(ct0)

    def slaved(i: int) -> None:
        # drift-side envelopes at knot i from parameter-side history <= i
        acc_rl = 0.0
        acc_cl = 0.0
        for j in range(i):
            lag = (i - j) * eta
            acc_rl += rt[i - j] * rl[j]
            acc_cl += (lag + 1.0) ** 2 * rt[i - j] ** 2 * cl[j]
        rl[i] = (ml / delta) * (ml * rt[i] + eta * acc_rl)
        cl[i] = 3.0 * (mz + k * ml**2 * ct[i] + (ml**2 / delta**2) * eta * acc_cl)

    slaved(0)
    for i in range(m):
        conv_rt = sum(rl[i - j] * rt[j] for j in range(i))
        rt[i + 1] = rt[i] + eta * ((mlam + ml) * rt[i] + eta * conv_rt)
        conv_ct = sum(
            ((i - j) * eta + 1.0) ** 2 * rl[i - j] ** 2 * ct[j] for j in range(i)
        )
        rate = 3.0 * ((mlam + ml) ** 2 * ct[i] + (k / delta) * cl[i] + eta * conv_ct)
        sq[i + 1] = sq[i] + eta * np.sqrt(rate)
        ct[i + 1] = sq[i + 1] ** 2
        slaved(i + 1)

    return PhiBounds(grid=grid, phi_Rt=rt, phi_Rl=rl, phi_Ct=ct, phi_Cl=cl, params=params)


def dominates(bounds: PhiBounds, sol) -> dict:
    """Check the envelopes against a solved kernel set on the same grid.

    Returns a dict of margins (envelope minus kernel norm, minimized over
    knots); all entries nonnegative means the envelopes dominate.
    """
    if bounds.grid != sol.grid:
        raise ValueError("phi bounds and solution live on different grids")
    m = sol.grid.m
    worst = {
        "R_theta": np.inf,
        "R_ell": np.inf,
        "C_theta_diag": np.inf,
        "C_ell_diag": np.inf,
        "Gamma": np.inf,
    }
    for i in range(m + 1):
        worst["C_theta_diag"] = min(
            worst["C_theta_diag"],
            bounds.phi_Ct[i] - np.linalg.norm(sol.C_theta[i, i], 2),
        )
        worst["C_ell_diag"] = min(
            worst["C_ell_diag"], bounds.phi_Cl[i] - np.linalg.norm(sol.C_ell[i, i], 2)
        )
        worst["Gamma"] = min(
            worst["Gamma"], bounds.params.M_ell - np.linalg.norm(sol.Gamma[i], 2)
        )
        for j in range(i + 1):
            worst["R_theta"] = min(
                worst["R_theta"],
                bounds.phi_Rt[i - j] - np.linalg.norm(sol.R_theta[i, j], 2),
            )
            if j < i:
                worst["R_ell"] = min(
                    worst["R_ell"],
                    bounds.phi_Rl[i - j] - np.linalg.norm(sol.R_ell[i, j], 2),
                )
    return worst
