"""Distribution distances between empirical and solver-generated clouds.

Clouds are uniform empirical measures over N points in R^D.  The scalar
Wasserstein-2 distance is exact (sorted coupling) for equal sample counts and
uses quantile interpolation otherwise.  Multivariate clouds are compared by
slicing: the quadratic mean of one-dimensional distances over random unit
projections, which for isotropic location families reproduces the Euclidean
shift up to the 1/sqrt(D) projection factor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import BlockKernel
from .rng import substream

QUANTILE_GRID = 2048


@dataclass
class SampleCloud:
    """N x D point cloud with uniform weights and a provenance label."""

    points: np.ndarray
    label: str = ""

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise ValueError("points must be an N x D array")
        if pts.shape[0] < 2:
            raise ValueError("a cloud needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("cloud contains non-finite entries")
        self.points = pts

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _quantiles(values: np.ndarray) -> np.ndarray:
    qs = (np.arange(QUANTILE_GRID) + 0.5) / QUANTILE_GRID
    return np.quantile(values, qs)


def wasserstein2_1d(a: SampleCloud, b: SampleCloud) -> float:
    """Exact scalar W2 for equal counts, quantile-interpolated otherwise."""
    if a.dim != 1 or b.dim != 1:
        raise ValueError(f"wasserstein2_1d needs 1-d clouds, got D={a.dim} and D={b.dim}")
    xa, xb = a.points[:, 0], b.points[:, 0]
    if a.n == b.n:
        diff = np.sort(xa) - np.sort(xb)
    else:
        diff = _quantiles(xa) - _quantiles(xb)
    return float(np.sqrt(np.mean(diff * diff)))


def sliced_w2(a: SampleCloud, b: SampleCloud, n_directions: int = 256, seed: int = 0) -> float:
    """Quadratic mean of 1-d W2 over seeded uniform unit projections."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.dim == 0:
        raise ValueError("clouds must have D >= 1")
    if n_directions < 1:
        raise ValueError("n_directions must be positive")
    g = substream(seed, "directions")
    dirs = g.standard_normal((n_directions, a.dim))
    norms = np.linalg.norm(dirs, axis=1)
    while np.any(norms == 0.0):  # measure-zero guard
        bad = norms == 0.0
        dirs[bad] = g.standard_normal((int(bad.sum()), a.dim))
        norms = np.linalg.norm(dirs, axis=1)
    dirs /= norms[:, None]
    pa = a.points @ dirs.T
    pb = b.points @ dirs.T
    acc = 0.0
    for j in range(n_directions):
        w = wasserstein2_1d(
            SampleCloud(pa[:, j : j + 1], label=a.label),
            SampleCloud(pb[:, j : j + 1], label=b.label),
        )
        acc += w * w
    return float(np.sqrt(acc / n_directions))


def kernel_sup_diff(a: BlockKernel, b: BlockKernel) -> tuple[float, tuple[int, int]]:
    """Largest operator-norm block difference over knot pairs, with argmax."""
    if a.grid != b.grid:
        raise ValueError("kernels live on different time grids")
    if a.k != b.k:
        raise ValueError(f"component mismatch: k={a.k} vs k={b.k}")
    best, arg = -1.0, (0, 0)
    m1 = a.blocks.shape[0]
    for i in range(m1):
        for j in range(m1):
            d = float(np.linalg.norm(a.blocks[i, j] - b.blocks[i, j], 2))
            if d > best:
                best, arg = d, (i, j)
    return best, arg


def cloud_to_csv(cloud: SampleCloud, path: str) -> None:
    header = f"label={cloud.label}\ncolumns={cloud.dim}"
    np.savetxt(path, cloud.points, delimiter=",", header=header, fmt="%.17g")


def cloud_from_csv(path: str) -> SampleCloud:
    label = ""
    with open(path) as fh:
        for line in fh:
            if line.startswith("# label="):
                label = line[len("# label=") :].strip()
            if not line.startswith("#"):
                break
    pts = np.loadtxt(path, delimiter=",", ndmin=2)
    return SampleCloud(points=pts, label=label)
