"""Block kernel containers, Cholesky assembly, and GP path sampling.

Covariance kernels live on the knot grid as (m+1) x (m+1) blocks of k x k
matrices, optionally extended by a star column (covariance with the planted
field) and a star-star block.  The assembled matrix orders the star block
first, then knots 0..m; incremental factorizations extend at the end, so the
leading factor never changes as knots are appended.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .rng import substream

JITTER_REL = 1e-10
JITTER_MAX_REL = 1e-4


class PsdViolationError(RuntimeError):
    def __init__(self, min_eig: float, context: str = "kernel") -> None:
        super().__init__(
            f"{context} is not positive semidefinite within the jitter budget "
            f"(min eigenvalue {min_eig:.6e})"
        )
        self.min_eig = min_eig


@dataclass
class BlockKernel:
    """Symmetric two-time covariance kernel on a knot grid."""

    grid: "TimeGrid"  # noqa: F821  (flow imports kernels; keep the hint loose)
    k: int
    blocks: np.ndarray  # (m+1, m+1, k, k)
    star_cols: np.ndarray | None = None  # (m+1, k, k), [i][a,b] = Cov(x_i_a, star_b)
    star_star: np.ndarray | None = None  # (k, k)

    def __post_init__(self) -> None:
        mm = self.grid.m + 1
        if self.blocks.shape != (mm, mm, self.k, self.k):
            raise ValueError(f"blocks must be ({mm},{mm},{self.k},{self.k}), got {self.blocks.shape}")
        if (self.star_cols is None) != (self.star_star is None):
            raise ValueError("star_cols and star_star must be given together")

    @property
    def has_star(self) -> bool:
        return self.star_cols is not None

    def assemble(self) -> np.ndarray:
        """Dense symmetric matrix, star block first then knots 0..m."""
        mm = self.grid.m + 1
        k = self.k
        off = k if self.has_star else 0
        dim = off + mm * k
        out = np.zeros((dim, dim))
        body = self.blocks.transpose(0, 2, 1, 3).reshape(mm * k, mm * k)
        out[off:, off:] = 0.5 * (body + body.T)
        if self.has_star:
            out[:k, :k] = 0.5 * (self.star_star + self.star_star.T)
            col = self.star_cols.reshape(mm * k, k)
            out[off:, :k] = col
            out[:k, off:] = col.T
        return out

    def diag_norms(self) -> np.ndarray:
        """Spectral norm of each diagonal block, length m+1."""
        return np.array([np.linalg.norm(self.blocks[i, i], 2) for i in range(self.grid.m + 1)])


@dataclass
class ResponseKernel:
    """Lower-triangular-in-time response kernel; blocks[i, j] for j <= i."""

    grid: "TimeGrid"  # noqa: F821
    k: int
    blocks: np.ndarray  # (m+1, m+1, k, k), zero above the diagonal
    star_cols: np.ndarray | None = None  # (m+1, k, k), response to the planted field

    def __post_init__(self) -> None:
        mm = self.grid.m + 1
        if self.blocks.shape != (mm, mm, self.k, self.k):
            raise ValueError(f"blocks must be ({mm},{mm},{self.k},{self.k}), got {self.blocks.shape}")
        iu = np.triu_indices(mm, k=1)
        if np.any(self.blocks[iu] != 0.0):
            raise ValueError("response kernel must vanish above the time diagonal")


# ---------------------------------------------------------------------------
# assembly and factorization


def _base_jitter(mat: np.ndarray) -> tuple[float, float]:
    scale = float(np.mean(np.diag(mat)))
    if not scale > 0.0:
        scale = 1e-20  # exactly-zero covariance still needs a factorizable target
    return JITTER_REL * scale, JITTER_MAX_REL * scale


def _factor_with_jitter(mat: np.ndarray, jitter: float | None, context: str) -> np.ndarray:
    base, cap = _base_jitter(mat)
    j = base if jitter is None else float(jitter)
    eye = np.eye(mat.shape[0])
    while True:
        try:
            return np.linalg.cholesky(mat + j * eye)
        except np.linalg.LinAlgError:
            j *= 10.0
            if j > cap:
                min_eig = float(np.linalg.eigvalsh(mat)[0])
                raise PsdViolationError(min_eig, context=context) from None
            warnings.warn(
                f"{context}: escalated factorization jitter to {j:.3e}", RuntimeWarning
            )


def assemble_and_factor(kernel: BlockKernel, jitter: float | None = None) -> np.ndarray:
    """Lower Cholesky factor of assembled kernel + jitter * I.

    The base jitter is always added (1e-10 of the mean diagonal); on failure
    it escalates by factors of 10 up to 1e-4 of the mean diagonal with a
    warning, and past that raises PsdViolationError with the offending
    eigenvalue.
    """
    return _factor_with_jitter(kernel.assemble(), jitter, context="assembled kernel")


def check_psd(kernel: BlockKernel) -> tuple[float, bool]:
    """(min eigenvalue, ok) with ok iff min_eig >= -1e-8 * mean diagonal."""
    mat = kernel.assemble()
    min_eig = float(np.linalg.eigvalsh(mat)[0])
    return min_eig, min_eig >= -1e-8 * max(float(np.mean(np.diag(mat))), 1e-300)


def project_psd(kernel: BlockKernel) -> BlockKernel:
    """Clip negative eigenvalues of the assembled kernel and re-split blocks."""
    mat = kernel.assemble()
    w, v = np.linalg.eigh(mat)
    mat2 = (v * np.clip(w, 0.0, None)) @ v.T
    mm = kernel.grid.m + 1
    k = kernel.k
    off = k if kernel.has_star else 0
    body = mat2[off:, off:].reshape(mm, k, mm, k).transpose(0, 2, 1, 3)
    star_cols = star_star = None
    if kernel.has_star:
        star_star = mat2[:k, :k]
        star_cols = mat2[off:, :k].reshape(mm, k, k)
    return BlockKernel(grid=kernel.grid, k=k, blocks=body.copy(), star_cols=star_cols, star_star=star_star)


def sample_gp(
    kernel: BlockKernel, scale: float, n_paths: int, seed: int
) -> tuple[np.ndarray, np.ndarray | None]:
    """Draw paths from N(0, scale * kernel).

    Returns (paths (n_paths, m+1, k), star (n_paths, k) or None); star draws
    are correlated with the paths through the star blocks.
    """
    mat = scale * kernel.assemble()
    ell = _factor_with_jitter(mat, None, context="gp covariance")
    g = substream(seed, "gp")
    draws = g.standard_normal((n_paths, mat.shape[0])) @ ell.T
    k = kernel.k
    if kernel.has_star:
        star = draws[:, :k]
        paths = draws[:, k:].reshape(n_paths, kernel.grid.m + 1, k)
        return paths, star
    return draws.reshape(n_paths, kernel.grid.m + 1, k), None


class IncrementalGaussianSampler:
    """Cholesky factor grown block by block, with per-path draws as it grows.

    Used by the induction solvers: at each knot the covariance gains one
    block row, and every Monte Carlo path must receive the matching Gaussian
    increment while keeping all past values fixed.  The leading factor is
    never touched, which is exactly the nesting property the solvers rely on.
    """

    def __init__(self, n_paths: int, block_dim: int, max_blocks: int, rng: np.random.Generator):
        self.n_paths = n_paths
        self.kb = block_dim
        self.rng = rng
        cap = max_blocks * block_dim
        self.L = np.zeros((cap, cap))
        self.normals = np.zeros((n_paths, cap))
        self.dim = 0
        self._diag_sum = 0.0

    def extend(self, row: np.ndarray, diag: np.ndarray) -> np.ndarray:
        """Append a block with Cov(new, old) = row, Cov(new, new) = diag.

        row has shape (kb, dim_so_far) and diag (kb, kb).  Returns the new
        per-path values, shape (n_paths, kb).
        """
        kb, dim = self.kb, self.dim
        if row.shape != (kb, dim) or diag.shape != (kb, kb):
            raise ValueError("extension blocks have inconsistent shapes")
        self._diag_sum += float(np.trace(diag))
        scale = self._diag_sum / (dim + kb)
        if not scale > 0.0:
            scale = 1e-20
        base, cap_j = JITTER_REL * scale, JITTER_MAX_REL * scale
        if dim > 0:
            b = solve_triangular(self.L[:dim, :dim], row.T, lower=True).T  # (kb, dim)
        else:
            b = np.zeros((kb, 0))
        schur = diag - b @ b.T
        schur = 0.5 * (schur + schur.T)
        j = base
        while True:
            try:
                ls = np.linalg.cholesky(schur + j * np.eye(kb))
                break
            except np.linalg.LinAlgError:
                j *= 10.0
                if j > cap_j:
                    min_eig = float(np.linalg.eigvalsh(schur)[0])
                    raise PsdViolationError(min_eig, context="incremental covariance") from None
                warnings.warn(
                    f"incremental covariance: escalated jitter to {j:.3e}", RuntimeWarning
                )
        self.L[dim : dim + kb, :dim] = b
        self.L[dim : dim + kb, dim : dim + kb] = ls
        fresh = self.rng.standard_normal((self.n_paths, kb))
        self.normals[:, dim : dim + kb] = fresh
        vals = self.normals[:, :dim] @ b.T + fresh @ ls.T
        self.dim = dim + kb
        return vals

    def factor(self) -> np.ndarray:
        return self.L[: self.dim, : self.dim].copy()


# ---------------------------------------------------------------------------
# CSV persistence


def write_kernel_csv(kernel, path: str, kind: str, seed: int | None = None) -> None:
    """Rows (i, j, a, b, t_i, t_j, value); star column uses i or j = -1.

    A JSON sidecar (path + ".json") records the grid, k, kind and seed.
    """
    grid = kernel.grid
    times = grid.times
    with open(path, "w") as fh:
        fh.write("i,j,a,b,t_i,t_j,value\n")
        for i in range(grid.m + 1):
            for j in range(grid.m + 1):
                blk = kernel.blocks[i, j]
                for a in range(kernel.k):
                    for b in range(kernel.k):
                        fh.write(
                            f"{i},{j},{a},{b},{times[i]:.17g},{times[j]:.17g},{blk[a, b]:.17g}\n"
                        )
        if getattr(kernel, "star_cols", None) is not None:
            for i in range(grid.m + 1):
                blk = kernel.star_cols[i]
                for a in range(kernel.k):
                    for b in range(kernel.k):
                        fh.write(f"{i},-1,{a},{b},{times[i]:.17g},nan,{blk[a, b]:.17g}\n")
        if getattr(kernel, "star_star", None) is not None:
            for a in range(kernel.k):
                for b in range(kernel.k):
                    fh.write(f"-1,-1,{a},{b},nan,nan,{kernel.star_star[a, b]:.17g}\n")
    sidecar = {
        "eta": grid.eta,
        "m": grid.m,
        "k": kernel.k,
        "kind": kind,
        "seed": seed,
        "has_star": getattr(kernel, "star_cols", None) is not None,
    }
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_kernel_csv(path: str):
    """Inverse of write_kernel_csv; the sidecar decides the container type."""
    from .flow import TimeGrid  # local import to avoid the module cycle

    with open(path + ".json") as fh:
        side = json.load(fh)
    grid = TimeGrid(eta=side["eta"], m=side["m"])
    k = side["k"]
    mm = grid.m + 1
    blocks = np.zeros((mm, mm, k, k))
    star_cols = np.zeros((mm, k, k)) if side.get("has_star") else None
    star_star = np.zeros((k, k)) if side.get("has_star") else None
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("i,j,a,b"):
            raise ValueError(f"{path}: unexpected kernel CSV header")
        for line in fh:
            si, sj, sa, sb, _, _, sv = line.rstrip("\n").split(",")
            i, j, a, b, v = int(si), int(sj), int(sa), int(sb), float(sv)
            if i == -1 and j == -1:
                star_star[a, b] = v
            elif j == -1:
                star_cols[i][a, b] = v
            else:
                blocks[i, j, a, b] = v
    if side["kind"] == "response":
        return ResponseKernel(grid=grid, k=k, blocks=blocks, star_cols=star_cols)
    return BlockKernel(grid=grid, k=k, blocks=blocks, star_cols=star_cols, star_star=star_star)
