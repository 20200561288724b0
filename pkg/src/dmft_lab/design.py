"""Random design matrices and population draws.

The design matrix has iid entries with variance 1/d (base distribution scaled
by 1/sqrt(d)).  Population laws describe the per-coordinate initial condition,
the optional joint (initial, planted) row law, and the per-row noise channel.
Only point masses, centered Gaussians / general Gaussians, finite mixtures of
those, and the logistic noise law are supported; this keeps every law exactly
serializable.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Union

import numpy as np

from .rng import substream

DIST_KINDS = ("Gaussian", "Rademacher", "UniformCentered")
_DIST_CODE = {name: idx + 1 for idx, name in enumerate(DIST_KINDS)}
_CODE_DIST = {v: k for k, v in _DIST_CODE.items()}

_MAGIC = int.from_bytes(b"DMFTLAB1", "little")
_VERSION = 1
_HEADER = struct.Struct("<8Q")  # magic, version, n, d, k, dist_kind, seed, checksum


# ---------------------------------------------------------------------------
# population laws


@dataclass(frozen=True)
class PointMassLaw:
    """Deterministic law placing all mass at a single vector."""

    value: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.value)

    def sample(self, g: np.random.Generator, n: int) -> np.ndarray:
        return np.tile(np.asarray(self.value, dtype=float), (n, 1))

    def second_moment(self) -> np.ndarray:
        v = np.asarray(self.value, dtype=float)
        return np.outer(v, v)


@dataclass(frozen=True)
class GaussianLaw:
    mean: tuple[float, ...]
    cov: tuple[tuple[float, ...], ...]

    @property
    def dim(self) -> int:
        return len(self.mean)

    def _factor(self) -> np.ndarray:
        c = np.asarray(self.cov, dtype=float)
        try:
            return np.linalg.cholesky(c)
        except np.linalg.LinAlgError:
            # rank-deficient covariance: symmetric square root via eigh
            w, v = np.linalg.eigh(c)
            return v * np.sqrt(np.clip(w, 0.0, None))

    def sample(self, g: np.random.Generator, n: int) -> np.ndarray:
        z = g.standard_normal((n, self.dim))
        return np.asarray(self.mean, dtype=float) + z @ self._factor().T

    def second_moment(self) -> np.ndarray:
        m = np.asarray(self.mean, dtype=float)
        return np.asarray(self.cov, dtype=float) + np.outer(m, m)


@dataclass(frozen=True)
class MixtureLaw:
    weights: tuple[float, ...]
    components: tuple[Union[PointMassLaw, GaussianLaw], ...]

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or len(w) != len(self.components) or len(w) == 0:
            raise ValueError("mixture weights and components must align and be nonempty")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise ValueError("mixture components must share a dimension")

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def sample(self, g: np.random.Generator, n: int) -> np.ndarray:
        w = np.asarray(self.weights, dtype=float)
        idx = g.choice(len(w), size=n, p=w / w.sum())
        # draw every component stream to keep consumption order fixed
        draws = np.stack([c.sample(g, n) for c in self.components])
        return draws[idx, np.arange(n)]

    def second_moment(self) -> np.ndarray:
        w = np.asarray(self.weights, dtype=float)
        return sum(wi * c.second_moment() for wi, c in zip(w, self.components))


@dataclass(frozen=True)
class LogisticNoiseLaw:
    """Scalar logistic noise; variance is scale^2 * pi^2 / 3."""

    scale: float = 1.0

    @property
    def dim(self) -> int:
        return 1

    def sample(self, g: np.random.Generator, n: int) -> np.ndarray:
        return g.logistic(0.0, self.scale, size=(n, 1))

    def second_moment(self) -> np.ndarray:
        return np.array([[self.scale**2 * np.pi**2 / 3.0]])


Law = Union[PointMassLaw, GaussianLaw, MixtureLaw, LogisticNoiseLaw]


@dataclass(frozen=True)
class PopulationSpec:
    """Laws for the initial condition, the planted row joint, and the noise.

    init_law is a law on R^k (per coordinate row of theta0).  planted_law,
    when present, is a law on R^{2k} for the joint row (theta0, theta_star)
    and takes precedence over init_law.  noise_law is scalar (per data row).
    """

    init_law: Law
    noise_law: Law
    planted_law: Law | None = None

    def k(self) -> int:
        if self.planted_law is not None:
            if self.planted_law.dim % 2 != 0:
                raise ValueError("planted_law must live on R^{2k}")
            return self.planted_law.dim // 2
        return self.init_law.dim

    def init_second_moment(self) -> np.ndarray:
        """E[theta0 theta0^T] row second moment, (k, k)."""
        if self.planted_law is not None:
            k = self.k()
            return self.planted_law.second_moment()[:k, :k]
        return self.init_law.second_moment()

    def star_second_moment(self) -> np.ndarray:
        k = self.k()
        if self.planted_law is None:
            return np.zeros((k, k))
        return self.planted_law.second_moment()[k:, k:]


def sample_population(
    spec: PopulationSpec, d: int, n: int, k: int, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw (theta0 (d,k), theta_star (d,k), z (n,)) from the population stream.

    Consumption order inside the stream is fixed: parameter rows first, noise
    second, so dumps and reruns agree bit for bit.
    """
    if spec.k() != k:
        raise ValueError(f"population laws have k={spec.k()}, requested k={k}")
    g = substream(seed, "population")
    if spec.planted_law is not None:
        rows = spec.planted_law.sample(g, d)
        theta0, theta_star = rows[:, :k].copy(), rows[:, k:].copy()
    else:
        theta0 = spec.init_law.sample(g, d)
        theta_star = np.zeros((d, k))
    z = spec.noise_law.sample(g, n).ravel()
    return theta0, theta_star, z


# ---------------------------------------------------------------------------
# design matrices


@dataclass(frozen=True)
class DesignMatrix:
    n: int
    d: int
    dist_kind: str
    seed: int
    entries: np.ndarray  # (n, d), iid base / sqrt(d)

    def spectral_norm(self) -> float:
        return float(np.linalg.norm(self.entries, 2))


def sample_design(n: int, d: int, dist_kind: str, seed: int) -> DesignMatrix:
    if n < 1 or d < 1:
        raise ValueError("design dimensions must be positive")
    if dist_kind not in DIST_KINDS:
        raise ValueError(f"unknown dist_kind {dist_kind!r}; expected one of {DIST_KINDS}")
    g = substream(seed, "design")
    if dist_kind == "Gaussian":
        base = g.standard_normal((n, d))
    elif dist_kind == "Rademacher":
        base = g.integers(0, 2, size=(n, d)).astype(float) * 2.0 - 1.0
    else:  # UniformCentered on [-sqrt(3), sqrt(3)], unit variance
        r = np.sqrt(3.0)
        base = g.uniform(-r, r, size=(n, d))
    return DesignMatrix(n=n, d=d, dist_kind=dist_kind, seed=int(seed), entries=base / np.sqrt(d))


def dump_design(dm: DesignMatrix, path: str) -> None:
    payload = np.ascontiguousarray(dm.entries, dtype="<f8").tobytes()
    header = _HEADER.pack(
        _MAGIC, _VERSION, dm.n, dm.d, 0, _DIST_CODE[dm.dist_kind], dm.seed, zlib.crc32(payload)
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_design(path: str) -> DesignMatrix:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated design file")
    magic, version, n, d, _k, code, seed, checksum = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError("not a design file (bad magic)")
    if version != _VERSION:
        raise ValueError(f"unsupported design file version {version}")
    payload = raw[_HEADER.size :]
    if zlib.crc32(payload) != checksum:
        raise ValueError("corrupt design file: checksum mismatch")
    if code not in _CODE_DIST:
        raise ValueError(f"unknown dist_kind code {code}")
    entries = np.frombuffer(payload, dtype="<f8").reshape(n, d).copy()
    return DesignMatrix(n=int(n), d=int(d), dist_kind=_CODE_DIST[code], seed=int(seed), entries=entries)


# ---------------------------------------------------------------------------
# law (de)serialization, used by configs and sidecar files


def law_to_dict(law: Law) -> dict:
    if isinstance(law, PointMassLaw):
        return {"kind": "point_mass", "value": list(law.value)}
    if isinstance(law, GaussianLaw):
        return {"kind": "gaussian", "mean": list(law.mean), "cov": [list(r) for r in law.cov]}
    if isinstance(law, MixtureLaw):
        return {
            "kind": "mixture",
            "weights": list(law.weights),
            "components": [law_to_dict(c) for c in law.components],
        }
    if isinstance(law, LogisticNoiseLaw):
        return {"kind": "logistic", "scale": law.scale}
    raise TypeError(f"unknown law type {type(law).__name__}")


def law_from_dict(obj: dict) -> Law:
    kind = obj.get("kind")
    if kind == "point_mass":
        return PointMassLaw(value=tuple(float(v) for v in obj["value"]))
    if kind == "gaussian":
        return GaussianLaw(
            mean=tuple(float(v) for v in obj["mean"]),
            cov=tuple(tuple(float(v) for v in row) for row in obj["cov"]),
        )
    if kind == "mixture":
        return MixtureLaw(
            weights=tuple(float(w) for w in obj["weights"]),
            components=tuple(law_from_dict(c) for c in obj["components"]),
        )
    if kind == "logistic":
        return LogisticNoiseLaw(scale=float(obj.get("scale", 1.0)))
    raise ValueError(f"unknown law kind {kind!r}")


def population_to_dict(spec: PopulationSpec) -> dict:
    out = {"init": law_to_dict(spec.init_law), "noise": law_to_dict(spec.noise_law)}
    out["planted"] = None if spec.planted_law is None else law_to_dict(spec.planted_law)
    return out


def population_from_dict(obj: dict) -> PopulationSpec:
    planted = obj.get("planted")
    return PopulationSpec(
        init_law=law_from_dict(obj["init"]),
        noise_law=law_from_dict(obj["noise"]),
        planted_law=None if planted is None else law_from_dict(planted),
    )


def standard_population(k: int = 1, noise: str = "gaussian", noise_scale: float = 1.0,
                        planted: bool = False, star_var: float = 1.0) -> PopulationSpec:
    """Convenience spec: N(0, I_k) init, optional independent N(0, star_var I_k)
    planted rows, and a scalar noise channel ("gaussian", "logistic", "none")."""
    if noise == "gaussian":
        noise_law: Law = GaussianLaw(mean=(0.0,), cov=((noise_scale**2,),))
    elif noise == "logistic":
        noise_law = LogisticNoiseLaw(scale=noise_scale)
    elif noise == "none":
        noise_law = PointMassLaw(value=(0.0,))
    else:
        raise ValueError(f"unknown noise channel {noise!r}")
    eye = tuple(tuple(1.0 if i == j else 0.0 for j in range(k)) for i in range(k))
    if not planted:
        return PopulationSpec(init_law=GaussianLaw(mean=(0.0,) * k, cov=eye), noise_law=noise_law)
    cov = tuple(
        tuple(
            (1.0 if i < k else star_var) if i == j else 0.0
            for j in range(2 * k)
        )
        for i in range(2 * k)
    )
    return PopulationSpec(
        init_law=GaussianLaw(mean=(0.0,) * k, cov=eye),
        noise_law=noise_law,
        planted_law=GaussianLaw(mean=(0.0,) * (2 * k), cov=cov),
    )
