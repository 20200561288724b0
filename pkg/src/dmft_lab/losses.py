"""Loss models and regularizer paths.

A loss model maps (t, r, w*, z) to a k-vector drift evaluated per sample.
Array layout: per-sample quantities are row vectors on the trailing axis, so
r and w* have shape (..., k), z has shape (...), and eval returns (..., k).
Derivative matrices use the convention  grad[a, b] = d eval_b / d r_a,  which
makes the chain rule compose by right multiplication on row vectors.

Models whose z-dependence factors through a binary label expose a
conditioning object; solvers use it to replace the label draw by the two
branches y = +1 / -1 weighted by P(y | w*).  The simulator never conditions,
it always consumes raw noise draws.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .design import GaussianLaw, Law, LogisticNoiseLaw

GLM_LINKS = ("Linear", "Logistic", "PhaseRetrieval")
GLM_BASE_LOSSES = ("Square", "Logistic", "HingeSq")


def _as_r(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.ndim == 0:
        raise ValueError("r must carry a trailing component axis of length k")
    return r


# ---------------------------------------------------------------------------
# label conditioning


class SignLabelConditioning:
    """Binary labels y = sign(w* + z), branches ordered (+1, -1).

    Branch weights are P(y | w*) under the scalar noise law; only laws with
    a smooth symmetric CDF are supported (logistic, centered Gaussian).
    """

    n_branches = 2

    @staticmethod
    def _cdf_pdf(noise_law: Law, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # returns (P(z >= -w), density of z at -w) for a symmetric scalar law
        if isinstance(noise_law, LogisticNoiseLaw):
            s = noise_law.scale
            p = expit(w / s)
            return p, p * (1.0 - p) / s
        if isinstance(noise_law, GaussianLaw):
            m = np.asarray(noise_law.mean, dtype=float)
            c = np.asarray(noise_law.cov, dtype=float)
            if m.shape != (1,) or abs(m[0]) > 1e-12:
                raise ValueError("label conditioning needs a centered scalar noise law")
            sd = float(np.sqrt(c[0, 0]))
            from scipy.special import ndtr

            return ndtr(w / sd), np.exp(-0.5 * (w / sd) ** 2) / (sd * np.sqrt(2 * np.pi))
        raise ValueError(
            f"label conditioning unsupported for noise law {type(noise_law).__name__}"
        )

    def z_eff(self, wstar: np.ndarray) -> np.ndarray:
        """Noise values realizing each branch label, shape (..., 2)."""
        w = np.asarray(wstar, dtype=float)[..., 0]
        return np.stack([-w + 1.0, -w - 1.0], axis=-1)

    def weights(self, wstar: np.ndarray, noise_law: Law) -> np.ndarray:
        w = np.asarray(wstar, dtype=float)[..., 0]
        p, _ = self._cdf_pdf(noise_law, w)
        return np.stack([p, 1.0 - p], axis=-1)

    def dweights(self, wstar: np.ndarray, noise_law: Law) -> np.ndarray:
        """d weights / d w*, shape (..., 2)."""
        w = np.asarray(wstar, dtype=float)[..., 0]
        _, dens = self._cdf_pdf(noise_law, w)
        return np.stack([dens, -dens], axis=-1)


# ---------------------------------------------------------------------------
# loss models


class LossModel:
    """Base class; concrete models fill in the attributes and methods below."""

    k: int
    lipschitz_M: float
    time_dependent: bool = False
    is_gradient: bool = False
    conditioning: SignLabelConditioning | None = None
    # True when grad_r and grad_wstar do not depend on (t, r, w*, z); lets the
    # solvers run the derivative recursions on one representative path.
    constant_jacobians: bool = False
    name: str = "loss"

    def eval(self, t: float, r, wstar, z) -> np.ndarray:
        raise NotImplementedError

    def grad_r(self, t: float, r, wstar, z) -> np.ndarray:
        raise NotImplementedError

    def grad_wstar(self, t: float, r, wstar, z) -> np.ndarray:
        raise NotImplementedError

    scalar_loss = None  # optional (t, r, wstar, z) -> (...,)

    def params(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {"name": self.name, **self.params()}


def _eye_like(r: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros(r.shape[:-1] + (k, k))
    out[...] = np.eye(k)
    return out


class _LinearSquareLoss(LossModel):
    """l(r, w*, z) = r - w* - z; the response is y = w* + z."""

    k = 1
    lipschitz_M = 1.0
    is_gradient = True
    constant_jacobians = True
    name = "glm:Linear+Square"

    def eval(self, t, r, wstar, z):
        r = _as_r(r)
        return r - np.asarray(wstar, dtype=float) - np.asarray(z, dtype=float)[..., None]

    def grad_r(self, t, r, wstar, z):
        return _eye_like(_as_r(r), 1)

    def grad_wstar(self, t, r, wstar, z):
        return -_eye_like(_as_r(r), 1)

    def scalar_loss(self, t, r, wstar, z):
        e = self.eval(t, r, wstar, z)[..., 0]
        return 0.5 * e * e

    def params(self):
        return {"link": "Linear", "base": "Square"}


class ZeroLoss(LossModel):
    """Identically zero drive; the flow reduces to pure ridge decay."""

    lipschitz_M = 0.0
    is_gradient = True
    constant_jacobians = True
    name = "zero"

    def __init__(self, k: int = 1) -> None:
        if k < 1:
            raise ValueError("k must be a positive integer")
        self.k = int(k)

    def eval(self, t, r, wstar, z):
        return np.zeros_like(_as_r(r))

    def grad_r(self, t, r, wstar, z):
        return np.zeros(_as_r(r).shape[:-1] + (self.k, self.k))

    def grad_wstar(self, t, r, wstar, z):
        return np.zeros(_as_r(r).shape[:-1] + (self.k, self.k))

    def scalar_loss(self, t, r, wstar, z):
        return np.zeros(_as_r(r).shape[:-1])

    def params(self):
        return {"k": self.k}


def make_zero_loss(k: int = 1) -> LossModel:
    return ZeroLoss(k)


def _sign_label(wstar, z):
    w = np.asarray(wstar, dtype=float)[..., 0]
    return np.where(w + np.asarray(z, dtype=float) >= 0.0, 1.0, -1.0)


class _LogisticLoss(LossModel):
    """l(r, w*, z) = -y * sigmoid(-y r) with y = 2*1{w* + z >= 0} - 1."""

    k = 1
    lipschitz_M = 0.25  # sup of sigmoid'
    is_gradient = True
    wstar_insensitive = True  # within a branch; w* only moves the weights
    name = "glm:Logistic+Logistic"

    def __init__(self) -> None:
        self.conditioning = SignLabelConditioning()

    def eval(self, t, r, wstar, z):
        r = _as_r(r)
        y = _sign_label(wstar, z)
        return (-y * expit(-y * r[..., 0]))[..., None]

    def grad_r(self, t, r, wstar, z):
        r = _as_r(r)
        s = expit(r[..., 0])
        return (s * (1.0 - s))[..., None, None]  # even in r, label drops out

    def grad_wstar(self, t, r, wstar, z):
        # zero within a fixed label branch; the w* sensitivity lives in the
        # branch weights and is handled through the conditioning object
        return np.zeros(_as_r(r).shape[:-1] + (1, 1))

    def scalar_loss(self, t, r, wstar, z):
        r = _as_r(r)
        y = _sign_label(wstar, z)
        return np.logaddexp(0.0, -y * r[..., 0])

    def params(self):
        return {"link": "Logistic", "base": "Logistic"}


class _HingeSqLoss(LossModel):
    """Squared-hinge drift -2 y (1 - y r)_+ for labels y = sign(w* + z)."""

    k = 1
    lipschitz_M = 2.0
    is_gradient = True
    wstar_insensitive = True  # within a branch; w* only moves the weights
    name = "glm:Logistic+HingeSq"

    def __init__(self) -> None:
        self.conditioning = SignLabelConditioning()

    def eval(self, t, r, wstar, z):
        r = _as_r(r)
        y = _sign_label(wstar, z)
        margin = 1.0 - y * r[..., 0]
        return (-2.0 * y * np.maximum(margin, 0.0))[..., None]

    def grad_r(self, t, r, wstar, z):
        r = _as_r(r)
        y = _sign_label(wstar, z)
        margin = 1.0 - y * r[..., 0]
        # subgradient: the kink at margin == 0 takes the value 0
        return np.where(margin > 0.0, 2.0, 0.0)[..., None, None]

    def grad_wstar(self, t, r, wstar, z):
        return np.zeros(_as_r(r).shape[:-1] + (1, 1))

    def scalar_loss(self, t, r, wstar, z):
        r = _as_r(r)
        y = _sign_label(wstar, z)
        return np.maximum(1.0 - y * r[..., 0], 0.0) ** 2

    def params(self):
        return {"link": "Logistic", "base": "HingeSq"}


class _PhaseRetrievalLoss(LossModel):
    """l = 4 r (r^2 - y) with y = (w*)^2 + z, the gradient of (r^2 - y)^2.

    r is clamped to |r| <= clamp_radius before evaluation; outside the clamp
    the drift is frozen (gradient 0), which guards the Euler simulator against
    overflow on diverging trajectories.
    """

    k = 1
    is_gradient = True
    name = "glm:PhaseRetrieval+Square"

    def __init__(self, clamp_radius: float = 1e6) -> None:
        if clamp_radius <= 0:
            raise ValueError("clamp_radius must be positive")
        self.clamp_radius = float(clamp_radius)
        # local bound on the clamped domain; dominated by the cubic term
        self.lipschitz_M = 12.0 * self.clamp_radius**2

    def _y(self, wstar, z):
        return np.asarray(wstar, dtype=float)[..., 0] ** 2 + np.asarray(z, dtype=float)

    def eval(self, t, r, wstar, z):
        r = _as_r(r)
        rc = np.clip(r[..., 0], -self.clamp_radius, self.clamp_radius)
        return (4.0 * rc * (rc * rc - self._y(wstar, z)))[..., None]

    def grad_r(self, t, r, wstar, z):
        r = _as_r(r)
        inside = np.abs(r[..., 0]) <= self.clamp_radius
        rc = np.clip(r[..., 0], -self.clamp_radius, self.clamp_radius)
        return (np.where(inside, 12.0 * rc * rc - 4.0 * self._y(wstar, z), 0.0))[..., None, None]

    def grad_wstar(self, t, r, wstar, z):
        r = _as_r(r)
        rc = np.clip(r[..., 0], -self.clamp_radius, self.clamp_radius)
        w = np.asarray(wstar, dtype=float)[..., 0]
        return (-8.0 * rc * w)[..., None, None]

    def scalar_loss(self, t, r, wstar, z):
        r = _as_r(r)
        rc = np.clip(r[..., 0], -self.clamp_radius, self.clamp_radius)
        return (rc * rc - self._y(wstar, z)) ** 2

    def params(self):
        return {"link": "PhaseRetrieval", "base": "Square", "clamp_radius": self.clamp_radius}


_GLM_TABLE = {
    ("Linear", "Square"): _LinearSquareLoss,
    ("Logistic", "Logistic"): _LogisticLoss,
    ("Logistic", "HingeSq"): _HingeSqLoss,
    ("PhaseRetrieval", "Square"): _PhaseRetrievalLoss,
}


def make_glm_loss(link: str, base_loss: str, **kwargs) -> LossModel:
    """Scalar GLM losses; unsupported (link, base) pairs raise ValueError."""
    if link not in GLM_LINKS:
        raise ValueError(f"unknown link {link!r}; expected one of {GLM_LINKS}")
    if base_loss not in GLM_BASE_LOSSES:
        raise ValueError(f"unknown base loss {base_loss!r}; expected one of {GLM_BASE_LOSSES}")
    cls = _GLM_TABLE.get((link, base_loss))
    if cls is None:
        raise ValueError(f"unsupported GLM combination ({link}, {base_loss})")
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# shallow network


_ACTIVATIONS = ("Tanh", "SoftPlus")


def _activation_funcs(name: str):
    if name == "Tanh":
        def s(x):
            return np.tanh(x)

        def s1(x):
            t = np.tanh(x)
            return 1.0 - t * t

        def s2(x):
            t = np.tanh(x)
            return -2.0 * t * (1.0 - t * t)

        # sup|s| on |x|<=6, sup|s'|, sup|s''|
        return s, s1, s2, 1.0, 1.0, 4.0 / (3.0 * np.sqrt(3.0))
    if name == "SoftPlus":
        def s(x):
            return np.logaddexp(0.0, x)

        def s1(x):
            return expit(x)

        def s2(x):
            e = expit(x)
            return e * (1.0 - e)

        return s, s1, s2, float(np.logaddexp(0.0, 6.0)), 1.0, 0.25
    raise ValueError(f"unknown activation {name!r}; expected one of {_ACTIVATIONS}")


class _ShallowNetLoss(LossModel):
    """Width-k committee machine under square loss.

    Prediction is sum_b alpha_b sigma(r_b), response y = sum_b alpha_b
    sigma(w*_b) + z, and eval_a = (prediction - y) * alpha_a * sigma'(r_a).
    The Jacobian in r is rank-one plus diagonal.
    """

    is_gradient = True
    name = "shallow_nn"

    def __init__(self, width: int, activation: str, alphas) -> None:
        if width < 1:
            raise ValueError("width must be >= 1")
        self.k = int(width)
        self.activation = activation
        self._s, self._s1, self._s2, s_sup6, s1_sup, s2_sup = _activation_funcs(activation)
        if alphas is None:
            alphas = np.full(width, 1.0 / width)
        self.alphas = np.asarray(alphas, dtype=float)
        if self.alphas.shape != (width,):
            raise ValueError(f"alphas must have shape ({width},)")
        a = self.alphas
        # declared bound on the reference box |r|,|w*|,|z| <= 6; square-loss
        # residuals grow with the noise so no global constant exists
        asum = float(np.abs(a).sum())
        self.lipschitz_M = float(
            (a**2).sum() * s1_sup**2 + np.abs(a).max() * s2_sup * (2.0 * asum * s_sup6 + 6.0)
        )

    def _resid(self, r, wstar, z):
        pred = np.einsum("...b,b->...", self._s(r), self.alphas)
        y = np.einsum("...b,b->...", self._s(np.asarray(wstar, dtype=float)), self.alphas)
        return pred - y - np.asarray(z, dtype=float)

    def eval(self, t, r, wstar, z):
        r = _as_r(r)
        resid = self._resid(r, wstar, z)
        return resid[..., None] * self.alphas * self._s1(r)

    def grad_r(self, t, r, wstar, z):
        r = _as_r(r)
        resid = self._resid(r, wstar, z)
        u = self.alphas * self._s1(r)  # (..., k)
        rank1 = u[..., :, None] * u[..., None, :]
        diag = resid[..., None] * self.alphas * self._s2(r)
        out = rank1.copy()
        idx = np.arange(self.k)
        out[..., idx, idx] += diag
        return out

    def grad_wstar(self, t, r, wstar, z):
        r = _as_r(r)
        w = np.broadcast_to(np.asarray(wstar, dtype=float), r.shape)
        uw = -self.alphas * self._s1(w)  # (..., k), derivative of -y
        ur = self.alphas * self._s1(r)
        return uw[..., :, None] * ur[..., None, :]

    def scalar_loss(self, t, r, wstar, z):
        return 0.5 * self._resid(_as_r(r), wstar, z) ** 2

    def params(self):
        return {
            "width": self.k,
            "activation": self.activation,
            "alphas": [float(a) for a in self.alphas],
            "base": "Square",
        }


def make_shallow_nn_loss(
    width: int, activation: str = "Tanh", alphas=None, base_loss: str = "Square"
) -> LossModel:
    if base_loss != "Square":
        raise ValueError("shallow network losses support only the Square base loss")
    return _ShallowNetLoss(width, activation, alphas)


# ---------------------------------------------------------------------------
# time dependence


class SwitchLoss(LossModel):
    """Hard switch between two losses at switch_time (first for t < switch)."""

    time_dependent = True
    name = "switch"

    def __init__(self, first: LossModel, second: LossModel, switch_time: float) -> None:
        if first.k != second.k:
            raise ValueError("switched losses must share k")
        if first.conditioning is not None or second.conditioning is not None:
            raise ValueError("switching conditioned losses is not supported")
        self.first, self.second = first, second
        self.switch_time = float(switch_time)
        self.k = first.k
        self.lipschitz_M = max(first.lipschitz_M, second.lipschitz_M)
        self.is_gradient = first.is_gradient and second.is_gradient
        self.constant_jacobians = False

    def _pick(self, t: float) -> LossModel:
        return self.first if t < self.switch_time else self.second

    def eval(self, t, r, wstar, z):
        return self._pick(t).eval(t, r, wstar, z)

    def grad_r(self, t, r, wstar, z):
        return self._pick(t).grad_r(t, r, wstar, z)

    def grad_wstar(self, t, r, wstar, z):
        return self._pick(t).grad_wstar(t, r, wstar, z)

    def scalar_loss(self, t, r, wstar, z):
        m = self._pick(t)
        if m.scalar_loss is None:
            return None
        return m.scalar_loss(t, r, wstar, z)

    def params(self):
        return {
            "first": self.first.to_dict(),
            "second": self.second.to_dict(),
            "switch_time": self.switch_time,
        }


def eval_time_dependent(model: LossModel, t: float, r, wstar, z) -> np.ndarray:
    """Uniform entry point: time-independent models are pinned to t = 0."""
    return model.eval(t if model.time_dependent else 0.0, r, wstar, z)


def loss_from_dict(obj: dict) -> LossModel:
    name = obj.get("name", "")
    if name == "zero":
        return ZeroLoss(int(obj.get("k", 1)))
    if name.startswith("glm:"):
        link, base = name[4:].split("+")
        kwargs = {}
        if "clamp_radius" in obj:
            kwargs["clamp_radius"] = float(obj["clamp_radius"])
        return make_glm_loss(link, base, **kwargs)
    if name == "shallow_nn":
        return make_shallow_nn_loss(
            int(obj["width"]), obj.get("activation", "Tanh"), obj.get("alphas")
        )
    if name == "switch":
        return SwitchLoss(
            loss_from_dict(obj["first"]), loss_from_dict(obj["second"]), float(obj["switch_time"])
        )
    raise ValueError(f"unknown loss record {name!r}")


# ---------------------------------------------------------------------------
# regularizer paths


class LambdaPath:
    """Symmetric k x k regularizer path t -> Lambda_t with a declared bound.

    bound_M bounds both the sup norm and the Lipschitz-in-t constant.
    """

    k: int
    bound_M: float

    def eval(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


class ConstantLambdaPath(LambdaPath):
    def __init__(self, value, k: int | None = None) -> None:
        v = np.asarray(value, dtype=float)
        if v.ndim == 0:
            if k is None:
                k = 1
            v = float(v) * np.eye(k)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("lambda value must be scalar or square")
        if not np.allclose(v, v.T, atol=1e-12):
            raise ValueError("lambda matrix must be symmetric")
        self.matrix = 0.5 * (v + v.T)
        self.k = v.shape[0]
        self.bound_M = float(np.linalg.norm(self.matrix, 2))

    def eval(self, t: float) -> np.ndarray:
        return self.matrix

    def to_dict(self) -> dict:
        return {"kind": "constant", "value": [list(row) for row in self.matrix]}


class RampLambdaPath(LambdaPath):
    """Linear interpolation from start to end over [0, ramp_time], flat after."""

    def __init__(self, start, end, ramp_time: float) -> None:
        a = ConstantLambdaPath(start)
        b = ConstantLambdaPath(end, k=a.k)
        if a.k != b.k:
            raise ValueError("ramp endpoints must share k")
        if ramp_time <= 0:
            raise ValueError("ramp_time must be positive")
        self.start_matrix, self.end_matrix = a.matrix, b.matrix
        self.ramp_time = float(ramp_time)
        self.k = a.k
        lip = np.linalg.norm(self.end_matrix - self.start_matrix, 2) / self.ramp_time
        self.bound_M = float(max(a.bound_M, b.bound_M, lip))

    def eval(self, t: float) -> np.ndarray:
        c = min(max(t / self.ramp_time, 0.0), 1.0)
        return (1.0 - c) * self.start_matrix + c * self.end_matrix

    def to_dict(self) -> dict:
        return {
            "kind": "ramp",
            "start": [list(r) for r in self.start_matrix],
            "end": [list(r) for r in self.end_matrix],
            "ramp_time": self.ramp_time,
        }


def lambda_from_dict(obj: dict, k: int | None = None) -> LambdaPath:
    kind = obj.get("kind", "constant")
    if kind == "constant":
        return ConstantLambdaPath(obj["value"], k=k)
    if kind == "ramp":
        return RampLambdaPath(obj["start"], obj["end"], float(obj["ramp_time"]))
    raise ValueError(f"unknown lambda path kind {kind!r}")
