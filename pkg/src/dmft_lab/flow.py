"""Forward-Euler simulator for the finite-dimensional flow.

State is theta in R^{d x k}; the drift couples coordinates only through the
design matrix X (n x d, iid entries of variance 1/d) and the per-row loss
drift evaluated at r = X theta.  theta_star is never updated.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .design import DesignMatrix
from .kernels import BlockKernel
from .losses import LambdaPath, LossModel


class FlowDivergenceError(RuntimeError):
    def __init__(self, step: int, norm: float, bound: float) -> None:
        super().__init__(
            f"flow diverged at step {step}: |theta|_F = {norm:.3e} exceeds guard {bound:.3e}"
        )
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    """Uniform knots t_i = i * eta for i = 0..m."""

    eta: float
    m: int

    def __post_init__(self) -> None:
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.m < 0:
            raise ValueError("m must be >= 0")

    @classmethod
    def from_horizon(cls, eta: float, horizon: float) -> "TimeGrid":
        if not eta > 0:
            raise ValueError("eta must be positive")
        if horizon < eta:
            raise ValueError("horizon must be at least one step")
        # floor with a guard against 0.3/0.1 = 2.999... artifacts
        return cls(eta=float(eta), m=int(np.floor(horizon / eta + 1e-9)))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.m + 1) * self.eta  # multiplication, not accumulation

    @property
    def horizon(self) -> float:
        return self.m * self.eta

    def index_of(self, t: float) -> int:
        i = int(round(t / self.eta))
        if i < 0 or i > self.m or abs(i * self.eta - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a knot of the grid (eta={self.eta}, m={self.m})")
        return i

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, TimeGrid) and self.m == other.m and abs(self.eta - other.eta) < 1e-15
        )

    def __hash__(self) -> int:
        return hash((self.eta, self.m))


@dataclass
class Trajectory:
    grid: TimeGrid
    stored_knots: np.ndarray  # sorted knot indices present in theta / r
    theta: np.ndarray  # (n_stored, d, k)
    r: np.ndarray  # (n_stored, n, k)
    theta_star: np.ndarray | None  # (d, k) when planted
    z: np.ndarray  # (n,)
    meta: dict = field(default_factory=dict)

    def _slot(self, knot: int) -> int:
        pos = np.searchsorted(self.stored_knots, knot)
        if pos >= len(self.stored_knots) or self.stored_knots[pos] != knot:
            raise ValueError(f"knot {knot} was not stored (stored: {self.stored_knots.tolist()})")
        return int(pos)

    def theta_at(self, knot: int) -> np.ndarray:
        return self.theta[self._slot(knot)]

    def r_at(self, knot: int) -> np.ndarray:
        return self.r[self._slot(knot)]


def _spectral_norm_sq_power(x: np.ndarray, iters: int = 60) -> float:
    # largest eigenvalue of x^T x by power iteration; plenty for a step warning
    g = np.random.Generator(np.random.Philox(12345))
    v = g.standard_normal(x.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = x.T @ (x @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


def run_flow_euler(
    design: DesignMatrix | np.ndarray,
    theta0: np.ndarray,
    theta_star: np.ndarray | None,
    z: np.ndarray,
    model: LossModel,
    lam: LambdaPath,
    grid: TimeGrid,
    observe_times=None,
    check_step_size: bool = True,
    divergence_guard: float = 1e8,
) -> Trajectory:
    """Iterate theta <- theta + eta * (-theta Lambda_t - X^T l_t(X theta) / delta).

    observe_times=None stores every knot; otherwise only the listed times are
    kept (they must lie on the grid).  Raises FlowDivergenceError when the
    state norm exceeds divergence_guard * (1 + |theta0|_F).
    """
    x = design.entries if isinstance(design, DesignMatrix) else np.asarray(design, dtype=float)
    n, d = x.shape
    delta = n / d
    theta = np.array(theta0, dtype=float)
    if theta.ndim == 1:
        theta = theta[:, None]
    k = theta.shape[1]
    if theta.shape != (d, k):
        raise ValueError(f"theta0 must be (d, k) = ({d}, {k}), got {theta.shape}")
    if model.k != k:
        raise ValueError(f"model has k={model.k}, state has k={k}")
    z = np.asarray(z, dtype=float).ravel()
    if z.shape != (n,):
        raise ValueError(f"z must have shape ({n},), got {z.shape}")
    if theta_star is not None:
        ts = np.asarray(theta_star, dtype=float)
        if ts.ndim == 1:
            ts = ts[:, None]
        wstar_rows = x @ ts
    else:
        ts = None
        wstar_rows = np.zeros((n, k))

    eta, m = grid.eta, grid.m
    if check_step_size:
        xsq = _spectral_norm_sq_power(x)
        if eta * (lam.bound_M + model.lipschitz_M * xsq / delta) >= 1.0:
            warnings.warn(
                f"Euler step eta={eta} is at or beyond the stability budget "
                f"(eta * (M_Lambda + M_l |X|^2 / delta) = "
                f"{eta * (lam.bound_M + model.lipschitz_M * xsq / delta):.3f} >= 1)",
                RuntimeWarning,
            )

    if observe_times is None:
        stored = np.arange(m + 1)
    else:
        stored = np.unique([grid.index_of(t) for t in observe_times])
    store_set = {int(i): slot for slot, i in enumerate(stored)}
    theta_out = np.empty((len(stored), d, k))
    r_out = np.empty((len(stored), n, k))

    guard = divergence_guard * (1.0 + float(np.linalg.norm(theta)))
    inv_delta_xt = x.T / delta  # (d, n), reused every step
    times = grid.times
    for i in range(m + 1):
        t = times[i]
        r = x @ theta
        if i in store_set:
            slot = store_set[i]
            theta_out[slot] = theta
            r_out[slot] = r
        if i == m:
            break
        f = model.eval(t, r, wstar_rows, z)  # (n, k)
        theta = theta + eta * (-(theta @ lam.eval(t)) - inv_delta_xt @ f)
        nrm = float(np.linalg.norm(theta))
        if not np.isfinite(nrm) or nrm > guard:
            raise FlowDivergenceError(step=i + 1, norm=nrm, bound=guard)

    meta = {
        "seed": design.seed if isinstance(design, DesignMatrix) else None,
        "model": model.to_dict(),
        "lambda": lam.to_dict(),
        "n": n,
        "d": d,
        "k": k,
        "planted": ts is not None,
    }
    return Trajectory(
        grid=grid, stored_knots=stored, theta=theta_out, r=r_out, theta_star=ts, z=z, meta=meta
    )


def empirical_kernel(traj: Trajectory) -> BlockKernel:
    """(1/d) theta^T theta across all stored knot pairs, plus star blocks.

    Requires a full trajectory (every knot stored) so the result aligns with
    solver kernels on the same grid.
    """
    if len(traj.stored_knots) != traj.grid.m + 1:
        raise ValueError("empirical_kernel needs a trajectory with every knot stored")
    th = traj.theta  # (m+1, d, k)
    d = th.shape[1]
    blocks = np.einsum("ida,jdb->ijab", th, th) / d
    star_cols = star_star = None
    if traj.theta_star is not None:
        star_cols = np.einsum("ida,db->iab", th, traj.theta_star) / d
        star_star = traj.theta_star.T @ traj.theta_star / d
    return BlockKernel(
        grid=traj.grid,
        k=th.shape[2],
        blocks=blocks,
        star_cols=star_cols,
        star_star=star_star,
    )


def empirical_marginal(traj: Trajectory, times, which: str) -> np.ndarray:
    """Stack per-coordinate (or per-row) values at the requested knots.

    which = "theta_rows": rows are the d coordinate rows, columns are the k
    components at each requested time, giving (d, k * len(times)).
    which = "r_rows_with_z": rows are the n data rows, with the noise value
    appended as the final column, giving (n, k * len(times) + 1).
    Times must lie exactly on the grid; there is no interpolation.
    """
    knots = [traj.grid.index_of(t) for t in times]
    if which == "theta_rows":
        cols = [traj.theta_at(i) for i in knots]
        return np.concatenate(cols, axis=1)
    if which == "r_rows_with_z":
        cols = [traj.r_at(i) for i in knots]
        return np.concatenate(cols + [traj.z[:, None]], axis=1)
    raise ValueError(f"unknown marginal kind {which!r}")


def trajectory_to_csv(traj: Trajectory, path: str) -> None:
    """One row per (step, time, coordinate_index, component_index, value)."""
    times = traj.grid.times
    with open(path, "w") as fh:
        fh.write("step,time,coordinate_index,component_index,value\n")
        for slot, knot in enumerate(traj.stored_knots):
            th = traj.theta[slot]
            t = times[knot]
            for ci in range(th.shape[0]):
                for a in range(th.shape[1]):
                    fh.write(f"{knot},{t:.17g},{ci},{a},{th[ci, a]:.17g}\n")
