"""Long-time fixed-point system and its consistency checks.

Solves the stationary equations the discrete-time kernels approach at large
time.  State per component: responses R_ell_inf, R_theta_inf, R_ell_star are
(k, k); the joint parameter second moment C_theta_inf is (2k, 2k) with the
solution block first and the planted block second; C_ell_inf is (k, k).
R_theta_inf is enforced to equal (lambda I + R_ell_inf)^{-1} throughout.

Expectations over (w_inf, w_star, z) use tensorized Gauss-Hermite quadrature
after a Cholesky factor of the 2x2 joint covariance (k = 1 default); a Monte
Carlo fallback with frozen normals covers k > 1.  Losses with a label
conditioning object integrate z exactly over the two label branches, with the
branch-weight derivatives supplying the score part of the star response.
"""
from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from .design import GaussianLaw, Law, LogisticNoiseLaw, MixtureLaw, PointMassLaw
from .losses import LossModel, make_glm_loss
from .rng import substream


class StationaryDivergenceError(RuntimeError):
    """Fixed-point iteration left the trust region (state beyond 1e12)."""


class SingularMatrixError(RuntimeError):
    """A matrix the update assumes invertible is singular; names the matrix."""


class MonotonicityViolationError(RuntimeError):
    """Proximal bracket expansion failed; the scalar map is not increasing."""


class ProxNonConvergenceError(RuntimeError):
    """Newton or bisection stalled before reaching the proximal tolerance."""


class DegenerateResidualError(RuntimeError):
    """Residual mapping undefined (vanishing loss norm or perp component)."""


@dataclass
class ExpectationConfig:
    """How to take expectations over (w_inf, w_star, z).

    method "quadrature" (k=1 only) tensorizes Gauss-Hermite nodes for the
    Gaussian pair with an atom decomposition of the noise law; "mc" draws
    mc_samples joint samples once and reuses them across iterations.
    noise_law is the law of the scalar noise channel z (point mass at zero
    when omitted); conditioned losses consume it through their branch
    weights instead of drawing from it.
    """

    method: str = "quadrature"
    gh_nodes: int = 41
    noise_atoms: int = 129
    mc_samples: int = 200_000
    seed: int = 0
    noise_law: Law | None = None


@dataclass
class StationaryPoint:
    R_ell_inf: np.ndarray
    R_theta_inf: np.ndarray
    R_ell_star: np.ndarray
    C_theta_inf: np.ndarray
    C_ell_inf: np.ndarray
    residual: float
    iterations: int
    k: int = 1
    gamma_inf: np.ndarray | None = None  # E[grad_r loss at r_inf], (k, k)
    trace: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


@dataclass
class SurCandesPoint:
    """Logistic-regression parametrization of a k=1 stationary point."""

    alpha: float
    sigma: float
    lambda_par: float
    kappa: float
    gamma: float


# ---------------------------------------------------------------------------
# expectation grids


def _gh_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w / w.sum()


def _chol2(c11: float, c12: float, c22: float) -> tuple[float, float, float]:
    # lower Cholesky of [[c11, c12], [c12, c22]] with rank-deficiency guards
    l11 = np.sqrt(max(c11, 0.0))
    l21 = c12 / l11 if l11 > 1e-150 else 0.0
    l22 = np.sqrt(max(c22 - l21 * l21, 0.0))
    return float(l11), float(l21), float(l22)


def _z_atoms(law: Law | None, cfg: ExpectationConfig) -> tuple[np.ndarray, np.ndarray]:
    """Finite atom decomposition (values, weights) of the scalar noise law."""
    if law is None:
        return np.zeros(1), np.ones(1)
    if isinstance(law, PointMassLaw):
        if law.dim != 1:
            raise ValueError("noise law must be scalar")
        return np.array([law.value[0]], dtype=float), np.ones(1)
    if isinstance(law, GaussianLaw):
        if law.dim != 1:
            raise ValueError("noise law must be scalar")
        x, w = _gh_nodes(cfg.gh_nodes)
        sd = float(np.sqrt(np.asarray(law.cov, dtype=float)[0, 0]))
        return float(law.mean[0]) + sd * x, w
    if isinstance(law, LogisticNoiseLaw):
        # quantile midpoints; the logistic CDF inverts in closed form
        m = cfg.noise_atoms
        p = (np.arange(m) + 0.5) / m
        return law.scale * np.log(p / (1.0 - p)), np.full(m, 1.0 / m)
    if isinstance(law, MixtureLaw):
        vals, wts = [], []
        for wi, comp in zip(law.weights, law.components):
            v, u = _z_atoms(comp, cfg)
            vals.append(v)
            wts.append(wi * u)
        return np.concatenate(vals), np.concatenate(wts)
    raise ValueError(f"no atom decomposition for noise law {type(law).__name__}")


def _grid_k1(
    model: LossModel,
    noise_law: Law | None,
    c11: float,
    c12: float,
    c22: float,
    cfg: ExpectationConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Flat (w, w_star, z, weight, score_weight) arrays for k = 1.

    score_weight carries d(branch weight)/d w_star times the base quadrature
    weight; it is zero for unconditioned losses.
    """
    x, p = _gh_nodes(cfg.gh_nodes)
    l11, l21, l22 = _chol2(c11, c12, c22)
    if l21 == 0.0 and l22 == 0.0:
        w0, ws0, p0 = l11 * x, np.zeros_like(x), p
    else:
        h1, h2 = np.meshgrid(x, x, indexing="ij")
        w0 = (l11 * h1).ravel()
        ws0 = (l21 * h1 + l22 * h2).ravel()
        p0 = np.outer(p, p).ravel()
    if model.conditioning is not None:
        law = noise_law if noise_law is not None else PointMassLaw(value=(0.0,))
        cond = model.conditioning
        col = ws0[:, None]
        zb = cond.z_eff(col)
        cw = cond.weights(col, law)
        dw = cond.dweights(col, law)
        nb = zb.shape[-1]
        return (
            np.repeat(w0, nb),
            np.repeat(ws0, nb),
            zb.ravel(),
            (p0[:, None] * cw).ravel(),
            (p0[:, None] * dw).ravel(),
        )
    zv, zw = _z_atoms(noise_law, cfg)
    m = len(zv)
    wt = (p0[:, None] * zw).ravel()
    return np.repeat(w0, m), np.repeat(ws0, m), np.tile(zv, len(w0)), wt, np.zeros_like(wt)


# ---------------------------------------------------------------------------
# proximal map


def _prox_bisect(
    w: np.ndarray,
    ws: np.ndarray,
    z: np.ndarray,
    c: float,
    model: LossModel,
    tol: float = 1e-12,
) -> np.ndarray:
    """Solve r + c * loss(r, w*, z) = w per lane by bracketed bisection."""

    def residual(r: np.ndarray) -> np.ndarray:
        return r + c * model.eval(0.0, r[..., None], ws[..., None], z)[..., 0] - w

    g0 = residual(w)
    exact = g0 == 0.0
    span = np.ones_like(w)
    for _ in range(64):
        lo, hi = w - span, w + span
        bad = (residual(lo) > 0.0) | (residual(hi) < 0.0)
        bad &= ~exact
        if not bad.any():
            break
        limit = 1e3 * (1.0 + np.abs(w))
        blown = bad & (span >= limit)
        if blown.any():
            idx = int(np.argmax(blown))
            raise MonotonicityViolationError(
                f"prox bracket expansion exceeded 1e3*(1+|w|) on {int(blown.sum())} "
                f"lane(s); example w={w[idx]:.6g}, w*={ws[idx]:.6g}, z={z[idx]:.6g}"
            )
        span = np.where(bad, np.minimum(span * 2.0, limit), span)
    else:
        raise ProxNonConvergenceError("prox bracket expansion did not terminate")
    lo, hi = w - span, w + span
    # widths below the local ULP scale cannot be bisected further
    ulp = 32.0 * np.finfo(float).eps
    for _ in range(200):
        tol_eff = np.maximum(tol, ulp * np.maximum(np.abs(lo), np.abs(hi)))
        if bool(np.all(hi - lo <= tol_eff)):
            break
        mid = 0.5 * (lo + hi)
        gm = residual(mid)
        lo = np.where(gm <= 0.0, mid, lo)
        hi = np.where(gm > 0.0, mid, hi)
    else:
        raise ProxNonConvergenceError(
            f"bisection stalled; bracket width {float(np.max(hi - lo)):.3e}"
        )
    r = 0.5 * (lo + hi)
    return np.where(exact, w, r)


def _prox_newton(
    w: np.ndarray,
    ws: np.ndarray,
    z: np.ndarray,
    c_mat: np.ndarray,
    model: LossModel,
    tol: float = 1e-12,
) -> np.ndarray:
    """Damped Newton for the k > 1 proximal system r + loss(r) @ C = w."""
    r = w.copy()

    def residual(r: np.ndarray) -> np.ndarray:
        return r + model.eval(0.0, r, ws, z) @ c_mat - w

    g = residual(r)
    best = np.max(np.abs(g), axis=-1)
    k = w.shape[-1]
    eye = np.eye(k)
    for _ in range(100):
        if float(best.max()) <= tol:
            return r
        grad = model.grad_r(0.0, r, ws, z)  # (..., k, k), [a, b] = d l_b / d r_a
        jac = eye + grad @ c_mat
        try:
            step = -np.linalg.solve(np.swapaxes(jac, -1, -2), g[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError("prox Jacobian I + grad_r @ (R_theta/delta)") from exc
        scale = np.ones(best.shape)
        improved = np.zeros(best.shape, dtype=bool)
        for _ in range(8):
            trial = r + scale[..., None] * step
            gt = residual(trial)
            norm = np.max(np.abs(gt), axis=-1)
            take = (~improved) & (norm < best)
            r = np.where(take[..., None], trial, r)
            g = np.where(take[..., None], gt, g)
            best = np.where(take, norm, best)
            improved |= take
            scale = np.where(improved, scale, scale * 0.5)
        if not improved.any():
            raise ProxNonConvergenceError(
                f"Newton stalled with residual {float(best.max()):.3e}"
            )
    raise ProxNonConvergenceError(f"Newton ran out of iterations at {float(best.max()):.3e}")


def prox_eta(w, w_star, z, R_theta, delta: float, model: LossModel):
    """Unique solution r of r + (R_theta/delta) loss(r, w*, z) = w.

    Accepts batched inputs on the leading axes; w and w_star carry a trailing
    component axis of length k, z is scalar per sample.
    """
    k = model.k
    w = np.asarray(w, dtype=float)
    ws = np.asarray(w_star, dtype=float)
    z = np.asarray(z, dtype=float)
    squeeze = w.ndim == 1
    if squeeze:
        w = w[None, :]
        ws = ws[None, :] if ws.ndim == 1 else ws
        z = np.atleast_1d(z)
    ws = np.broadcast_to(ws, w.shape)
    z = np.broadcast_to(z, w.shape[:-1])
    rt = np.asarray(R_theta, dtype=float)
    if k == 1:
        c = float(rt.reshape(-1)[0]) / delta
        r = _prox_bisect(w[..., 0].ravel(), ws[..., 0].ravel(), z.ravel(), c, model)
        out = r.reshape(w.shape[:-1])[..., None]
    else:
        if rt.shape != (k, k):
            raise ValueError(f"R_theta must be ({k}, {k})")
        out = _prox_newton(w, np.ascontiguousarray(ws), z, rt / delta, model)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# fixed-point solver


def _check_magnitude(values: dict, lam: float) -> None:
    worst = max(abs(float(np.max(np.abs(v)))) for v in values.values())
    if worst > 1e12 or not np.isfinite(worst):
        extra = " (likely no stationary point; separable-data phase)" if lam == 0.0 else ""
        raise StationaryDivergenceError(
            f"fixed-point state exceeded 1e12 ({worst:.3e}){extra}"
        )


def _solve_k1(
    model: LossModel,
    lam: float,
    delta: float,
    gamma2: float,
    cfg: ExpectationConfig,
    damping: float,
    tol: float,
    max_iter: int,
) -> StationaryPoint:
    law = cfg.noise_law

    def inv_resp(rl: float) -> float:
        denom = lam + rl
        if abs(denom) < 1e-300:
            raise SingularMatrixError("lambda + R_ell_inf is singular")
        return 1.0 / denom

    # init at the declared drift bound, clipped to a workable window so
    # models with enormous local bounds do not start beyond the trust region
    Rl = float(min(max(model.lipschitz_M, 1e-3), 1e6))
    Rstar = 0.0
    C11, C12, C22 = max(gamma2, 1.0), 0.0, gamma2
    a = inv_resp(Rl)
    w, ws, z, wt, dwt = _grid_k1(model, law, C11, C12, C22, cfg)
    el0 = model.eval(0.0, w[:, None], ws[:, None], z)[:, 0]
    Cl = float(wt @ (el0 * el0))

    trace: list[dict] = []
    gamma_inf = np.nan
    defect = np.inf
    rl_hist: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        a = inv_resp(Rl)
        w, ws, z, wt, dwt = _grid_k1(model, law, C11, C12, C22, cfg)
        r = _prox_bisect(w, ws, z, a / delta, model)
        el = model.eval(0.0, r[:, None], ws[:, None], z)[:, 0]
        dl = model.grad_r(0.0, r[:, None], ws[:, None], z)[:, 0, 0]
        dlw = model.grad_wstar(0.0, r[:, None], ws[:, None], z)[:, 0, 0]
        denom = 1.0 + (a / delta) * dl
        if np.any(np.abs(denom) < 1e-300):
            raise SingularMatrixError("1 + (R_theta/delta) grad_r loss is singular")
        q = 1.0 / denom
        Rl_new = delta * float(wt @ (1.0 - q)) / a
        Rstar_new = float(dwt @ el) + float(wt @ (q * dlw))
        Cl_new = float(wt @ (el * el))
        gamma_inf = float(wt @ dl)
        defect = max(
            abs(Rl_new - Rl) / (1.0 + abs(Rl)),
            abs(Rstar_new - Rstar) / (1.0 + abs(Rstar)),
            abs(Cl_new - Cl) / (1.0 + abs(Cl)),
        )
        Rl += damping * (Rl_new - Rl)
        Rstar += damping * (Rstar_new - Rstar)
        Cl += damping * (Cl_new - Cl)
        a = inv_resp(Rl)
        C12 = -a * Rstar * gamma2
        C11 = a * a * (Cl / delta + Rstar * Rstar * gamma2)
        rl_hist.append(Rl)
        trace.append(
            {"iteration": it, "R_ell": Rl, "R_ell_star": Rstar, "C_ell": Cl,
             "C_theta": C11, "defect": defect}
        )
        _check_magnitude({"R_ell": Rl, "C_ell": Cl, "C_theta": C11}, lam)
        if defect < tol:
            break
    else:
        tail = np.diff(rl_hist[-min(50, len(rl_hist)) :])
        drift = len(tail) > 5 and (np.all(tail > 0) or np.all(tail < 0))
        msg = f"stationary solve stopped at max_iter={max_iter} with defect {defect:.3e}"
        if drift and lam == 0.0:
            msg += "; R_ell drifts monotonically, likely no stationary point (separable-data phase)"
        elif drift:
            msg += "; state still drifting monotonically"
        warnings.warn(msg, RuntimeWarning)

    return StationaryPoint(
        R_ell_inf=np.array([[Rl]]),
        R_theta_inf=np.array([[a]]),
        R_ell_star=np.array([[Rstar]]),
        C_theta_inf=np.array([[C11, C12], [C12, C22]]),
        C_ell_inf=np.array([[Cl]]),
        residual=float(defect),
        iterations=it,
        k=1,
        gamma_inf=np.array([[gamma_inf]]),
        trace=trace,
        diagnostics={"method": cfg.method, "nodes": int(len(wt))},
    )


def _solve_mc(
    model: LossModel,
    lam: float,
    delta: float,
    star_moment: np.ndarray,
    cfg: ExpectationConfig,
    damping: float,
    tol: float,
    max_iter: int,
) -> StationaryPoint:
    """Monte Carlo fallback; normals are frozen so the loop is deterministic."""
    k = model.k
    if model.conditioning is not None:
        raise ValueError("the Monte Carlo path does not support conditioned losses")
    rng = substream(cfg.seed, "mc")
    n = cfg.mc_samples
    normals = rng.standard_normal((n, 2 * k))
    law = cfg.noise_law if cfg.noise_law is not None else PointMassLaw(value=(0.0,))
    zs = law.sample(rng, n).ravel()
    eye = np.eye(k)

    def joint_factor(c_th: np.ndarray) -> np.ndarray:
        try:
            return np.linalg.cholesky(c_th + 1e-12 * np.mean(np.diag(c_th)) * np.eye(2 * k))
        except np.linalg.LinAlgError:
            vals, vecs = np.linalg.eigh(c_th)
            return vecs * np.sqrt(np.clip(vals, 0.0, None))

    Rl = eye * float(min(max(model.lipschitz_M, 1e-3), 1e6))
    Rstar = np.zeros((k, k))
    C11 = np.maximum(star_moment, eye)
    C12 = np.zeros((k, k))
    Cl = None
    trace: list[dict] = []
    gamma_inf = np.full((k, k), np.nan)
    defect = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        try:
            A = np.linalg.inv(lam * eye + Rl)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError("lambda I + R_ell_inf is singular") from exc
        c_th = np.block([[C11, C12], [C12.T, star_moment]])
        rows = normals @ joint_factor(c_th).T
        w, ws = rows[:, :k], rows[:, k:]
        r = _prox_newton(w, ws, zs, A / delta, model)
        el = model.eval(0.0, r, ws, zs)
        grad = model.grad_r(0.0, r, ws, zs)
        gradw = model.grad_wstar(0.0, r, ws, zs)
        jac = eye + grad @ (A / delta)
        try:
            q = np.linalg.inv(jac)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError("I + (R_theta/delta) grad_r loss is singular") from exc
        try:
            Rl_new = delta * np.linalg.solve(A.T, (eye - q.mean(axis=0)).T).T
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError("R_theta_inf is singular") from exc
        Rstar_new = (q @ gradw.swapaxes(-1, -2)).mean(axis=0).T
        Cl_new = np.einsum("na,nb->ab", el, el) / n
        gamma_inf = grad.mean(axis=0)
        prev = (Rl, Rstar, Cl if Cl is not None else Cl_new)
        defect = max(
            float(np.max(np.abs(Rl_new - prev[0]))) / (1.0 + float(np.max(np.abs(prev[0])))),
            float(np.max(np.abs(Rstar_new - prev[1]))) / (1.0 + float(np.max(np.abs(prev[1])))),
            float(np.max(np.abs(Cl_new - prev[2]))) / (1.0 + float(np.max(np.abs(prev[2])))),
        )
        Rl = Rl + damping * (Rl_new - Rl)
        Rstar = Rstar + damping * (Rstar_new - Rstar)
        Cl = Cl_new if Cl is None else Cl + damping * (Cl_new - Cl)
        A = np.linalg.inv(lam * eye + Rl)
        C12 = -(A @ Rstar) @ star_moment
        C11 = A @ (Cl / delta + Rstar @ star_moment @ Rstar.T) @ A.T
        trace.append({"iteration": it, "defect": defect})
        _check_magnitude({"R_ell": Rl, "C_ell": Cl, "C_theta": C11}, lam)
        if defect < tol:
            break
    else:
        warnings.warn(
            f"stationary solve stopped at max_iter={max_iter} with defect {defect:.3e}",
            RuntimeWarning,
        )
    c_th = np.block([[C11, C12], [C12.T, star_moment]])
    se = float(np.sqrt(np.max(np.einsum("na,nb->ab", el * el, el * el)) / n))
    return StationaryPoint(
        R_ell_inf=Rl,
        R_theta_inf=np.linalg.inv(lam * eye + Rl),
        R_ell_star=Rstar,
        C_theta_inf=0.5 * (c_th + c_th.T),
        C_ell_inf=0.5 * (Cl + Cl.T),
        residual=float(defect),
        iterations=it,
        k=k,
        gamma_inf=gamma_inf,
        trace=trace,
        diagnostics={"method": "mc", "samples": n, "se_C_ell_scale": se},
    )


def solve_stationary(
    model: LossModel,
    lambda_reg: float,
    delta: float,
    pop_star_second_moment,
    expectation_cfg: ExpectationConfig | None = None,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 500,
) -> StationaryPoint:
    """Damped fixed-point solve of the long-time self-consistency system.

    lambda_reg is the scalar ridge level (the regularizer is lambda I);
    pop_star_second_moment is E[theta* theta*^T] per row, scalar accepted
    for k = 1.  lambda_reg = 0 is allowed but existence is not guaranteed;
    divergence then reports the likely separable phase.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    lam = float(lambda_reg)
    if lam < 0:
        raise ValueError("lambda_reg must be nonnegative")
    if model.time_dependent:
        raise ValueError("stationary solve requires a time-independent loss")
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    cfg = expectation_cfg if expectation_cfg is not None else ExpectationConfig()
    k = model.k
    star = np.atleast_2d(np.asarray(pop_star_second_moment, dtype=float))
    if star.shape != (k, k):
        raise ValueError(f"pop_star_second_moment must be ({k}, {k}) or scalar for k=1")
    if k == 1 and cfg.method == "quadrature":
        return _solve_k1(model, lam, delta, float(star[0, 0]), cfg, damping, tol, max_iter)
    if cfg.method not in ("quadrature", "mc"):
        raise ValueError(f"unknown expectation method {cfg.method!r}")
    return _solve_mc(model, lam, delta, star, cfg, damping, tol, max_iter)


# ---------------------------------------------------------------------------
# logistic specialization


def logistic_sur_candes(
    delta: float,
    gamma2: float,
    cfg: ExpectationConfig | None = None,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 500,
) -> tuple[SurCandesPoint, StationaryPoint]:
    """Unregularized planted logistic regression in (alpha, sigma, lambda) form.

    gamma2 is the second moment of the planted parameter.  Below the
    zero-signal sample-ratio threshold delta = 2 a warning is emitted; actual
    non-existence surfaces as a divergence error flagging the separable phase.
    """
    if gamma2 < 0:
        raise ValueError("gamma2 must be nonnegative")
    if delta <= 2.0:
        warnings.warn(
            "delta at or below the zero-signal interpolation threshold 2; "
            "the logistic fixed point may not exist",
            RuntimeWarning,
        )
    base = cfg if cfg is not None else ExpectationConfig()
    run_cfg = dataclasses.replace(base, noise_law=LogisticNoiseLaw(scale=1.0))
    model = make_glm_loss("Logistic", "Logistic")
    sp = solve_stationary(
        model, 0.0, delta, gamma2, run_cfg, damping=damping, tol=tol, max_iter=max_iter
    )
    rl = float(sp.R_ell_inf[0, 0])
    if abs(rl) < 1e-300:
        raise SingularMatrixError("R_ell_inf is singular in the logistic mapping")
    point = SurCandesPoint(
        alpha=0.0 if gamma2 == 0.0 else float(-sp.R_ell_star[0, 0] / rl),
        sigma=float(np.sqrt(sp.C_ell_inf[0, 0]) / abs(rl)),
        lambda_par=float(1.0 / (delta * rl)),
        kappa=1.0 / delta,
        gamma=float(np.sqrt(sp.C_theta_inf[1, 1])),
    )
    return point, sp


# ---------------------------------------------------------------------------
# Gordon-side stationarity residual


def gordon_residual(
    sp: StationaryPoint,
    model: LossModel,
    lambda_reg: float,
    delta: float,
    expectation_cfg: ExpectationConfig | None = None,
) -> tuple[np.ndarray, dict]:
    """Norms of the three function-space stationarity equations at sp.

    Reconstructs (xi, r, theta) from the candidate point and evaluates how
    far the min-max first-order conditions are from holding.  The third
    equation defines xi = loss(r) and is zero by construction; it is
    evaluated and reported anyway.  k = 1 only.
    """
    if sp.k != 1 or model.k != 1:
        raise ValueError("the residual check supports k = 1 only")
    cfg = expectation_cfg if expectation_cfg is not None else ExpectationConfig()
    lam = float(lambda_reg)
    Rl = float(sp.R_ell_inf[0, 0])
    Rs = float(sp.R_ell_star[0, 0])
    Cl = float(sp.C_ell_inf[0, 0])
    C11 = float(sp.C_theta_inf[0, 0])
    C12 = float(sp.C_theta_inf[0, 1])
    g2 = float(sp.C_theta_inf[1, 1])
    if lam + Rl == 0.0:
        raise SingularMatrixError("lambda + R_ell_inf is singular")
    a = 1.0 / (lam + Rl)
    if Cl <= 0.0:
        raise DegenerateResidualError("C_ell_inf vanishes; xi has zero norm")
    c_xi = float(np.sqrt(Cl))
    c_w = C12 / g2 if g2 > 0 else 0.0
    c_h = float(np.sqrt(max(C11 - c_w * C12, 0.0)))
    if c_h <= 0.0:
        raise DegenerateResidualError("perpendicular parameter component vanishes")

    w, ws, z, wt, _ = _grid_k1(model, cfg.noise_law, C11, C12, g2, cfg)
    h = (w - c_w * ws) / c_h
    rt = float(sp.R_theta_inf[0, 0])
    r = _prox_bisect(w, ws, z, rt / delta, model)
    xi = model.eval(0.0, r[:, None], ws[:, None], z)[:, 0]
    m2 = float(wt @ (xi * xi))
    if m2 <= 1e-300:
        raise DegenerateResidualError("reconstructed xi vanishes")
    m_h = float(wt @ (xi * h))
    m_w = float(wt @ (xi * ws))

    perp = a * c_xi / np.sqrt(delta)  # perpendicular component norm of theta
    inner = -a * Rs * g2  # <theta, theta*>
    P = m_h / perp
    if g2 > 0:
        Q = m_w / g2 - m_h * inner / (perp * g2)
        res1_sq = (Q - (P + lam) * a * Rs) ** 2 * g2
    else:
        Q = 0.0
        res1_sq = 0.0
    res1_sq += ((P + lam) * perp - np.sqrt(m2 / delta)) ** 2
    rt_gordon = a * c_xi / np.sqrt(m2)
    res2 = float(np.sqrt(wt @ (w - (rt_gordon / delta) * xi - r) ** 2))
    xi_again = model.eval(0.0, r[:, None], ws[:, None], z)[:, 0]
    res3 = float(np.sqrt(wt @ (xi - xi_again) ** 2))
    mapped = {
        "P": float(P),
        "Q": float(Q),
        "R_theta_gordon": float(rt_gordon),
        "xi_norm": float(np.sqrt(m2)),
        "perp_norm": float(perp),
        "theta_star_inner": float(inner),
        "m_h": m_h,
        "m_wstar": m_w,
    }
    return np.array([float(np.sqrt(res1_sq)), res2, res3]), mapped
