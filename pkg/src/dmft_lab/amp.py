"""AMP state-evolution solver over the knot grid.

Independent bookkeeping for the same limit the DMFT solver targets: the
iteration tracks the parameter ensemble g, the drift-noise u with covariance
E[f f^T]/delta (shifted one knot), the Gaussian field w with covariance
E[g g^T], and the coefficient arrays

    Xi[i, j]   = E[ d f_i / d (field at knot j) ]   (Onsager coefficients)
    D[i, j]    = d g_i / d u_j                       (deterministic, D[j,j] = eta I)

with the memory weights zeta_{i,j} = D[i, j+1].  Outputs are converted to a
DmftSolution via R_theta = D / eta, R_ell = Xi / eta off the diagonal and
Gamma = diagonal Xi.  Only neutral infrastructure (rng substreams, the
incremental Cholesky sampler, loss evaluation, weighted means) is shared
with the DMFT module; the induction code is its own.
"""
from __future__ import annotations

import numpy as np

from .design import PopulationSpec
from .dmft import DmftSolution, _validate
from .flow import TimeGrid
from .kernels import IncrementalGaussianSampler
from .losses import LambdaPath, LossModel
from .mc import make_branches, mean_outer, score_mean, se_outer, wmean, wse
from .rng import substream


def solve_amp_se(
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

    if planted:
        rows = pop.planted_law.sample(pop_rng, P)
        g = rows[:, :k].copy()
        star = rows[:, k:].copy()
    else:
        g = pop.init_law.sample(pop_rng, P)
        star = None

    Mw = np.zeros((m + 1, m + 1, k, k))  # field covariance E[g_i g_j^T]
    fcov = np.zeros((m + 1, m + 1, k, k))  # E[f_i f_j^T]; u covariance is fcov/delta
    D = np.zeros((m + 1, m + 1, k, k))
    Xi = np.zeros((m + 1, m + 1, k, k))
    Mw_star = np.zeros((m + 1, k, k)) if planted else None
    Mss = None
    Xi_star = np.zeros((m + 1, k, k)) if planted else None
    se_xi_diag = np.zeros((m + 1, k, k))
    se_fcov = np.zeros((m + 1, k, k))
    se_mw = np.zeros((m + 1, k, k))

    Mw[0, 0] = mean_outer(g, g)
    se_mw[0] = se_outer(g, g)
    if planted:
        Mw_star[0] = mean_outer(g, star)
        Mss = mean_outer(star, star)

    field_sampler = IncrementalGaussianSampler(P, k, m + 2, w_rng)
    if planted:
        wstar_field = field_sampler.extend(np.zeros((k, 0)), Mss)
        field = field_sampler.extend(Mw_star[0], Mw[0, 0])
    else:
        wstar_field = np.zeros((P, k))
        field = field_sampler.extend(np.zeros((k, 0)), Mw[0, 0])
    u_sampler = IncrementalGaussianSampler(P, k, max(m, 1), u_rng)

    bc = make_branches(model, pop, wstar_field, noise_rng)
    S = bc.z_eff.shape[1]
    collapsed = bool(model.constant_jacobians)
    Pe, Se = (1, 1) if collapsed else (P, S)
    wts_eff = np.ones((1, 1)) if collapsed else bc.weights
    track_psi = planted and not getattr(model, "wstar_insensitive", False)

    g_slab = np.zeros((m + 1, P, k))
    g_slab[0] = g
    f_slab = np.zeros((m + 1, P, S, k))
    phi = np.zeros((Pe, Se, m + 1, m + 1, k, k))
    psi_slab = np.zeros((m + 1, Pe, Se, k, k)) if track_psi else None

    wst_b = wstar_field[:, None, :]

    def drift_eval(i: int, r: np.ndarray):
        t = times[i]
        f = model.eval(t, r, wst_b, bc.z_eff)
        if collapsed:
            gr = model.grad_r(t, r[:1, :1], wst_b[:1], bc.z_eff[:1, :1])
            gw = model.grad_wstar(t, r[:1, :1], wst_b[:1], bc.z_eff[:1, :1]) if track_psi else None
        else:
            gr = model.grad_r(t, r, wst_b, bc.z_eff)
            gw = model.grad_wstar(t, r, wst_b, bc.z_eff) if track_psi else None
        return f, gr, gw

    r_now = np.broadcast_to(field[:, None, :], (P, S, k)).copy()
    f_now, gr_now, gw_now = drift_eval(0, r_now)
    f_slab[0] = f_now
    phi[:, :, 0, 0] = gr_now
    if track_psi:
        psi_slab[0] = gw_now

    D[0, 0] = eta * eye
    Xi[0, 0] = wmean(wts_eff, gr_now)
    se_xi_diag[0] = wse(wts_eff, gr_now)
    prod0 = f_now[:, :, :, None] * f_now[:, :, None, :]
    fcov[0, 0] = wmean(bc.weights, prod0)
    se_fcov[0] = wse(bc.weights, prod0)
    if planted:
        onsager_star = np.zeros((k, k))
        if bc.conditioned:
            onsager_star += score_mean(bc.dweights, f_now)[None, :]
        if track_psi:
            onsager_star += wmean(wts_eff, psi_slab[0])
        Xi_star[0] = onsager_star

    for i in range(m):
        # derivative propagation d g_{i+1} / d u_.
        lam_now = lam.eval(times[i])
        decay = eye - eta * lam_now
        conv = np.einsum("jmab,jbc->mac", D[: i + 1, : i + 1], Xi[i, : i + 1])
        D[i + 1, : i + 1] = np.einsum("jab,bc->jac", D[i, : i + 1], decay) - eta * conv
        D[i + 1, i + 1] = eta * eye

        # drift-noise extension and parameter update
        row_u = fcov[i, :i].transpose(1, 0, 2).reshape(k, i * k) / delta
        u_now = u_sampler.extend(row_u, fcov[i, i] / delta)
        onsager = np.einsum("jpa,jab->pb", g_slab[: i + 1], Xi[i, : i + 1])
        correction = u_now - onsager
        if planted:
            correction = correction - star @ Xi_star[i]
        g = g @ decay + eta * correction
        g_slab[i + 1] = g
        for j in range(i + 2):
            blk = mean_outer(g, g_slab[j])
            Mw[i + 1, j] = blk
            Mw[j, i + 1] = blk.T
        se_mw[i + 1] = se_outer(g, g)
        if planted:
            Mw_star[i + 1] = mean_outer(g, star)

        # field extension and residual update
        if planted:
            row_w = np.concatenate(
                [Mw_star[i + 1]] + [Mw[i + 1, j] for j in range(i + 1)], axis=1
            )
        else:
            row_w = Mw[i + 1, : i + 1].transpose(1, 0, 2).reshape(k, (i + 1) * k)
        field = field_sampler.extend(row_w, Mw[i + 1, i + 1])
        zeta_row = D[i + 1, 1 : i + 2]  # zeta_{i+1, j} = D[i+1, j+1]
        mem = np.einsum("jpsa,jab->psb", f_slab[: i + 1], zeta_row)
        r_now = field[:, None, :] - mem / delta
        f_now, gr_now, gw_now = drift_eval(i + 1, r_now)
        f_slab[i + 1] = f_now

        # per-path Onsager recursions and their averages
        acc = np.einsum("psjmab,jbc->psmac", phi[:, :, : i + 1, : i + 1], zeta_row)
        phi[:, :, i + 1, : i + 1] = -np.einsum("psmab,psbc->psmac", acc, gr_now) / delta
        phi[:, :, i + 1, i + 1] = gr_now
        if track_psi:
            p_mem = np.einsum("jpsab,jbc->psac", psi_slab[: i + 1], zeta_row)
            psi_slab[i + 1] = -np.einsum("psab,psbc->psac", p_mem, gr_now) / delta + gw_now

        Xi[i + 1, : i + 2] = wmean(wts_eff, phi[:, :, i + 1, : i + 2])
        se_xi_diag[i + 1] = wse(wts_eff, gr_now)
        if planted:
            onsager_star = np.zeros((k, k))
            if bc.conditioned:
                onsager_star += score_mean(bc.dweights, f_now)[None, :]
            if track_psi:
                onsager_star += wmean(wts_eff, psi_slab[i + 1])
            Xi_star[i + 1] = onsager_star
        for j in range(i + 2):
            prod = f_now[:, :, :, None] * f_slab[j][:, :, None, :]
            blk = wmean(bc.weights, prod)
            fcov[i + 1, j] = blk
            fcov[j, i + 1] = blk.T
        se_fcov[i + 1] = wse(bc.weights, f_now[:, :, :, None] * f_now[:, :, None, :])

    # convert to the common container: R_theta = D/eta, off-diagonal R_ell =
    # Xi/eta, Gamma = diagonal Xi
    R_theta = D / eta
    R_ell = np.zeros((m + 1, m + 1, k, k))
    Gam = np.zeros((m + 1, k, k))
    for i in range(m + 1):
        Gam[i] = Xi[i, i]
        if i > 0:
            R_ell[i, :i] = Xi[i, :i] / eta
    for i in range(m + 1):
        R_theta[i, i] = np.eye(k)  # exact identity, not eta*I/eta

    diagnostics = {
        "se_gamma": se_xi_diag,
        "se_C_ell_diag": se_fcov,
        "se_C_theta_diag": se_mw,
        "branches": S,
        "collapsed_jacobians": collapsed,
    }
    return DmftSolution(
        grid=grid,
        k=k,
        delta=float(delta),
        planted=planted,
        C_theta=Mw,
        C_ell=fcov,
        R_theta=R_theta,
        R_ell=R_ell,
        Gamma=Gam,
        C_theta_star=Mw_star,
        C_star_star=Mss,
        R_ell_star=Xi_star,
        mc_paths=P,
        seed=int(seed),
        diagnostics=diagnostics,
    )
