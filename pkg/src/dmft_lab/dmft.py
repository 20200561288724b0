"""Discrete-time DMFT solver: forward induction over the knot grid.

At each knot the solver carries a Monte Carlo ensemble of effective parameter
paths (driven by correlated Gaussian noise with the loss-drift covariance)
and of effective risk paths (a Gaussian field with the parameter covariance,
corrected by a discrete memory term), together with per-path derivative
recursions whose averages produce the response kernels.  Order within one
iteration producing knot t_{i+1}:

    1. parameter-response row R_theta(t_{i+1}, .)
    2. noise draw u_i, parameter update, covariance row C_theta(t_{i+1}, .)
    3. field extension w_{i+1}, risk update r_{i+1}, drift evaluations
    4. per-path derivative rows (risk response, planted response)
    5. averages: Gamma, R_ell row, planted column, C_ell row

All per-sample quantities are rows on the trailing axis; derivative matrices
use grad[a, b] = d out_b / d in_a, so chains compose by right multiplication.
Labels consumed from the master seed: "mc.population", "mc.noise", "mc.w",
"mc.u" (and "sample.*" in sample_dmft_paths).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import PopulationSpec
from .flow import TimeGrid
from .kernels import BlockKernel, IncrementalGaussianSampler, ResponseKernel, _factor_with_jitter
from .losses import LambdaPath, LossModel
from .mc import make_branches, mean_outer, score_mean, se_outer, wmean, wse
from .rng import substream


@dataclass
class DmftSolution:
    grid: TimeGrid
    k: int
    delta: float
    planted: bool
    C_theta: np.ndarray  # (m+1, m+1, k, k)
    C_ell: np.ndarray  # (m+1, m+1, k, k)
    R_theta: np.ndarray  # (m+1, m+1, k, k), lower triangular, identity diagonal
    R_ell: np.ndarray  # (m+1, m+1, k, k), strictly lower triangular
    Gamma: np.ndarray  # (m+1, k, k), equal-time drift derivative
    C_theta_star: np.ndarray | None = None  # (m+1, k, k)
    C_star_star: np.ndarray | None = None  # (k, k)
    R_ell_star: np.ndarray | None = None  # (m+1, k, k)
    mc_paths: int = 0
    seed: int = 0
    diagnostics: dict | None = None

    def theta_kernel(self) -> BlockKernel:
        return BlockKernel(
            grid=self.grid,
            k=self.k,
            blocks=self.C_theta,
            star_cols=self.C_theta_star,
            star_star=self.C_star_star,
        )

    def ell_kernel(self) -> BlockKernel:
        return BlockKernel(grid=self.grid, k=self.k, blocks=self.C_ell)

    def theta_response(self) -> ResponseKernel:
        return ResponseKernel(grid=self.grid, k=self.k, blocks=self.R_theta)

    def ell_response(self) -> ResponseKernel:
        return ResponseKernel(
            grid=self.grid, k=self.k, blocks=self.R_ell, star_cols=self.R_ell_star
        )


def _validate(model: LossModel, lam: LambdaPath, pop: PopulationSpec, delta, mc_paths, planted):
    if mc_paths < 100:
        raise ValueError("mc_paths must be at least 100")
    if not delta > 0:
        raise ValueError("delta must be positive")
    if lam.k != model.k:
        raise ValueError(f"lambda path has k={lam.k}, model has k={model.k}")
    if pop.k() != model.k:
        raise ValueError(f"population has k={pop.k()}, model has k={model.k}")
    if planted and pop.planted_law is None:
        raise ValueError("planted run requires a planted_law in the population spec")
    if planted and model.conditioning is not None and model.k != 1:
        raise NotImplementedError("label conditioning with planted signal needs k = 1")


def solve_dmft_discrete(
    model: LossModel,
    lam: LambdaPath,
    pop: PopulationSpec,
    delta: float,
    grid: TimeGrid,
    mc_paths: int = 20000,
    seed: int = 0,
    planted: bool = False,
) -> DmftSolution:
    _validate(model, lam, pop, delta, mc_paths, planted)
    P, k, m, eta = int(mc_paths), model.k, grid.m, grid.eta
    times = grid.times
    eye = np.eye(k)

    pop_rng = substream(seed, "mc.population")
    noise_rng = substream(seed, "mc.noise")
    w_rng = substream(seed, "mc.w")
    u_rng = substream(seed, "mc.u")

    # population draws feed the parameter-side ensemble
    if planted:
        rows = pop.planted_law.sample(pop_rng, P)
        theta = rows[:, :k].copy()
        theta_star = rows[:, k:].copy()
    else:
        theta = pop.init_law.sample(pop_rng, P)
        theta_star = None

    Cth = np.zeros((m + 1, m + 1, k, k))
    Cl = np.zeros((m + 1, m + 1, k, k))
    Rth = np.zeros((m + 1, m + 1, k, k))
    Rl = np.zeros((m + 1, m + 1, k, k))
    Gam = np.zeros((m + 1, k, k))
    Cth_star = np.zeros((m + 1, k, k)) if planted else None
    Css = None
    Rl_star = np.zeros((m + 1, k, k)) if planted else None
    se_gamma = np.zeros((m + 1, k, k))
    se_cl = np.zeros((m + 1, k, k))
    se_cth = np.zeros((m + 1, k, k))

    Cth[0, 0] = mean_outer(theta, theta)
    se_cth[0] = se_outer(theta, theta)
    if planted:
        Cth_star[0] = mean_outer(theta, theta_star)
        Css = mean_outer(theta_star, theta_star)

    # risk-side Gaussian field, star block first so knot extension nests
    w_sampler = IncrementalGaussianSampler(P, k, m + 2, w_rng)
    if planted:
        wstar_field = w_sampler.extend(np.zeros((k, 0)), Css)
        w_now = w_sampler.extend(Cth_star[0], Cth[0, 0])
    else:
        wstar_field = np.zeros((P, k))
        w_now = w_sampler.extend(np.zeros((k, 0)), Cth[0, 0])
    u_sampler = IncrementalGaussianSampler(P, k, max(m, 1), u_rng)

    bc = make_branches(model, pop, wstar_field, noise_rng)
    S = bc.z_eff.shape[1]
    collapsed = bool(model.constant_jacobians)
    Pe, Se = (1, 1) if collapsed else (P, S)
    wts_eff = np.ones((1, 1)) if collapsed else bc.weights
    track_S = planted and not getattr(model, "wstar_insensitive", False)

    theta_slab = np.zeros((m + 1, P, k))
    theta_slab[0] = theta
    f_slab = np.zeros((m + 1, P, S, k))
    F = np.zeros((Pe, Se, m + 1, m + 1, k, k))
    S_slab = np.zeros((m + 1, Pe, Se, k, k)) if track_S else None

    wst_b = wstar_field[:, None, :]

    def drift_eval(i: int, r: np.ndarray):
        t = times[i]
        f = model.eval(t, r, wst_b, bc.z_eff)
        if collapsed:
            g = model.grad_r(t, r[:1, :1], wst_b[:1], bc.z_eff[:1, :1])
            h = model.grad_wstar(t, r[:1, :1], wst_b[:1], bc.z_eff[:1, :1]) if track_S else None
        else:
            g = model.grad_r(t, r, wst_b, bc.z_eff)
            h = model.grad_wstar(t, r, wst_b, bc.z_eff) if track_S else None
        return f, g, h

    r_now = np.broadcast_to(w_now[:, None, :], (P, S, k)).copy()
    f_now, g_now, h_now = drift_eval(0, r_now)
    f_slab[0] = f_now
    F[:, :, 0, 0] = g_now
    if track_S:
        S_slab[0] = h_now

    Rth[0, 0] = eye
    Gam[0] = wmean(wts_eff, g_now)
    se_gamma[0] = wse(wts_eff, g_now)
    prod0 = f_now[:, :, :, None] * f_now[:, :, None, :]
    Cl[0, 0] = wmean(bc.weights, prod0)
    se_cl[0] = wse(bc.weights, prod0)
    if planted:
        star_resp = np.zeros((k, k))
        if bc.conditioned:
            star_resp += score_mean(bc.dweights, f_now)[None, :]
        if track_S:
            star_resp += wmean(wts_eff, S_slab[0])
        Rl_star[0] = star_resp

    for i in range(m):
        # (1) parameter-response row for the new knot
        drift = eye - eta * (lam.eval(times[i]) + Gam[i])
        new_row = np.einsum("jab,bc->jac", Rth[i, : i + 1], drift)
        if i > 0:
            conv = np.einsum("mjab,mbc->jac", Rth[:i, : i + 1], Rl[i, :i])
            new_row = new_row - eta * eta * conv
        Rth[i + 1, : i + 1] = new_row
        Rth[i + 1, i + 1] = eye

        # (2) drift-noise draw, parameter update, covariance row
        row_u = Cl[i, :i].transpose(1, 0, 2).reshape(k, i * k) / delta
        u_now = u_sampler.extend(row_u, Cl[i, i] / delta)
        xi_row = np.empty((i + 1, k, k))
        if i > 0:
            xi_row[:i] = eta * Rl[i, :i]
        xi_row[i] = Gam[i]
        onsager = np.einsum("jpa,jab->pb", theta_slab[: i + 1], xi_row)
        upd = u_now - onsager
        if planted:
            upd = upd - theta_star @ Rl_star[i]
        theta = theta @ (eye - eta * lam.eval(times[i])) + eta * upd
        theta_slab[i + 1] = theta
        for j in range(i + 2):
            blk = mean_outer(theta, theta_slab[j])
            Cth[i + 1, j] = blk
            Cth[j, i + 1] = blk.T
        se_cth[i + 1] = se_outer(theta, theta)
        if planted:
            Cth_star[i + 1] = mean_outer(theta, theta_star)

        # (3) field extension and risk update
        if planted:
            row_w = np.concatenate(
                [Cth_star[i + 1]] + [Cth[i + 1, j] for j in range(i + 1)], axis=1
            )
        else:
            row_w = Cth[i + 1, : i + 1].transpose(1, 0, 2).reshape(k, (i + 1) * k)
        w_now = w_sampler.extend(row_w, Cth[i + 1, i + 1])
        zeta_row = eta * Rth[i + 1, 1 : i + 2]  # (i+1, k, k)
        mem = np.einsum("jpsa,jab->psb", f_slab[: i + 1], zeta_row)
        r_now = w_now[:, None, :] - mem / delta
        f_now, g_now, h_now = drift_eval(i + 1, r_now)
        f_slab[i + 1] = f_now

        # (4) per-path derivative rows
        ssum = np.einsum("psjmab,jbc->psmac", F[:, :, : i + 1, : i + 1], zeta_row)
        F[:, :, i + 1, : i + 1] = -np.einsum("psmab,psbc->psmac", ssum, g_now) / delta
        F[:, :, i + 1, i + 1] = g_now
        if track_S:
            s_mem = np.einsum("jpsab,jbc->psac", S_slab[: i + 1], zeta_row)
            S_slab[i + 1] = -np.einsum("psab,psbc->psac", s_mem, g_now) / delta + h_now

        # (5) averages
        Gam[i + 1] = wmean(wts_eff, g_now)
        se_gamma[i + 1] = wse(wts_eff, g_now)
        Rl[i + 1, : i + 1] = wmean(wts_eff, F[:, :, i + 1, : i + 1]) / eta
        if planted:
            star_resp = np.zeros((k, k))
            if bc.conditioned:
                star_resp += score_mean(bc.dweights, f_now)[None, :]
            if track_S:
                star_resp += wmean(wts_eff, S_slab[i + 1])
            Rl_star[i + 1] = star_resp
        for j in range(i + 2):
            prod = f_now[:, :, :, None] * f_slab[j][:, :, None, :]
            blk = wmean(bc.weights, prod)
            Cl[i + 1, j] = blk
            Cl[j, i + 1] = blk.T
        se_cl[i + 1] = wse(bc.weights, f_now[:, :, :, None] * f_now[:, :, None, :])

    diagnostics = {
        "se_gamma": se_gamma,
        "se_C_ell_diag": se_cl,
        "se_C_theta_diag": se_cth,
        "branches": S,
        "collapsed_jacobians": collapsed,
    }
    return DmftSolution(
        grid=grid,
        k=k,
        delta=float(delta),
        planted=planted,
        C_theta=Cth,
        C_ell=Cl,
        R_theta=Rth,
        R_ell=Rl,
        Gamma=Gam,
        C_theta_star=Cth_star,
        C_star_star=Css,
        R_ell_star=Rl_star,
        mc_paths=P,
        seed=int(seed),
        diagnostics=diagnostics,
    )


def sample_dmft_paths(
    sol: DmftSolution,
    model: LossModel,
    lam: LambdaPath,
    pop: PopulationSpec,
    delta: float,
    n_samples: int,
    seed: int,
) -> dict:
    """Fresh draws from the solved effective processes (kernels stay frozen).

    The parameter cloud replays the parameter recursion with new population
    and drift-noise draws; the risk cloud draws the Gaussian field plus raw
    noise and replays the risk recursion.  The two clouds are independent;
    use them for marginal comparisons, not joint statistics.
    """
    grid, k, m, eta = sol.grid, sol.k, sol.grid.m, sol.grid.eta
    times = grid.times
    eye = np.eye(k)
    N = int(n_samples)
    pop_rng = substream(seed, "sample.population")
    noise_rng = substream(seed, "sample.noise")
    w_rng = substream(seed, "sample.w")
    u_rng = substream(seed, "sample.u")

    if sol.planted:
        rows = pop.planted_law.sample(pop_rng, N)
        theta, theta_star = rows[:, :k].copy(), rows[:, k:].copy()
    else:
        theta = pop.init_law.sample(pop_rng, N)
        theta_star = np.zeros((N, k))

    # drift-noise paths for the parameter recursion (steps 0..m-1)
    theta_out = np.zeros((N, m + 1, k))
    theta_out[:, 0] = theta
    if m > 0:
        ucov = sol.C_ell[:m, :m].transpose(0, 2, 1, 3).reshape(m * k, m * k) / delta
        lu = _factor_with_jitter(0.5 * (ucov + ucov.T), None, "sampled drift-noise covariance")
        u_all = (u_rng.standard_normal((N, m * k)) @ lu.T).reshape(N, m, k)
    for i in range(m):
        xi_row = np.empty((i + 1, k, k))
        if i > 0:
            xi_row[:i] = eta * sol.R_ell[i, :i]
        xi_row[i] = sol.Gamma[i]
        onsager = np.einsum("jpa,jab->pb", theta_out[:, : i + 1].transpose(1, 0, 2), xi_row)
        upd = u_all[:, i] - onsager
        if sol.planted:
            upd = upd - theta_star @ sol.R_ell_star[i]
        theta = theta @ (eye - eta * lam.eval(times[i])) + eta * upd
        theta_out[:, i + 1] = theta

    # risk-side field draw plus raw noise, then the memory recursion
    w_paths, wstar = sample_gp_like(sol, N, w_rng)
    z = pop.noise_law.sample(noise_rng, N).ravel()
    r_out = np.zeros((N, m + 1, k))
    f_hist = np.zeros((m + 1, N, k))
    for i in range(m + 1):
        r = w_paths[:, i].copy()
        if i > 0:
            zeta_row = eta * sol.R_theta[i, 1 : i + 1]
            r -= np.einsum("jpa,jab->pb", f_hist[:i], zeta_row) / delta
        r_out[:, i] = r
        f_hist[i] = model.eval(times[i], r, wstar, z)

    return {
        "theta": theta_out,
        "theta_star": theta_star,
        "w": w_paths,
        "wstar": wstar,
        "r": r_out,
        "z": z,
    }


def sample_gp_like(sol: DmftSolution, n: int, rng: np.random.Generator):
    """Joint (w paths, w*) draw from the solved parameter covariance."""
    kern = sol.theta_kernel()
    mat = kern.assemble()
    ell = _factor_with_jitter(mat, None, "sampled field covariance")
    draws = rng.standard_normal((n, mat.shape[0])) @ ell.T
    k, m = sol.k, sol.grid.m
    if kern.has_star:
        return draws[:, k:].reshape(n, m + 1, k), draws[:, :k]
    return draws.reshape(n, m + 1, k), np.zeros((n, k))
