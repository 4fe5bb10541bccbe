"""Dense-tensor primitives with hand-derived gradients.

Everything is float64 and row-major. There is no autodiff graph: layers that
need gradients expose an explicit backward path, and `grad_check` compares
those analytic gradients against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericDomainError, ShapeError

# tanh-approximation GELU coefficients (fixed so outputs are bit-stable)
GELU_C0 = 0.7978845608
GELU_C1 = 0.044715


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    `grad` exists iff the tensor is trainable; backward passes accumulate
    into it and `zero_grad` resets it between steps.
    """

    __slots__ = ("data", "grad", "trainable")

    def __init__(self, data, trainable: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.trainable = bool(trainable)
        self.grad = np.zeros_like(self.data) if self.trainable else None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), trainable=self.trainable)
        if self.trainable:
            t.grad = self.grad.copy()
        return t

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, trainable={self.trainable})"


class Rng:
    """Seedable random stream with deterministic named substreams.

    The same (seed, key path) always yields the same stream, so enabling or
    disabling one component never shifts the draws seen by another.
    """

    def __init__(self, seed: int, _key: tuple = ()):
        self.seed = int(seed)
        self._key = tuple(int(k) for k in _key)
        self.gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, *self._key]))
        )

    def child(self, *key) -> "Rng":
        ints = []
        for k in key:
            if isinstance(k, str):
                import zlib

                ints.append(zlib.crc32(k.encode("utf-8")))
            else:
                ints.append(int(k))
        return Rng(self.seed, self._key + tuple(ints))


@dataclass(frozen=True)
class InitSpec:
    """Weight initialization distribution.

    uniform-fan-in: U[-b, b] with b = gain * sqrt(1 / fan_in)
    normal-scaled:  N(0, (gain / sqrt(fan_in))^2)
    """

    kind: str = "uniform-fan-in"
    gain: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform-fan-in", "normal-scaled"):
            raise ConfigError(f"unknown init kind: {self.kind!r}")


def sample(init: InitSpec, rng: Rng, fan_in: int, count: int) -> np.ndarray:
    """Draw `count` i.i.d. values from the init distribution."""
    if fan_in < 1:
        raise ConfigError(f"fan_in must be >= 1, got {fan_in}")
    scale = init.gain / np.sqrt(float(fan_in))
    if init.kind == "uniform-fan-in":
        return rng.gen.uniform(-scale, scale, size=count)
    return rng.gen.normal(0.0, scale, size=count)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _require_finite(a: np.ndarray, what: str):
    if not np.all(np.isfinite(a)):
        raise NumericDomainError(f"non-finite values in {what}")


def gelu_array(x: np.ndarray) -> np.ndarray:
    return gelu_forward(x)[0]


def gelu_forward(x: np.ndarray):
    """GELU plus the tanh term, cached so the backward pass skips the tanh."""
    x2 = x * x
    t = np.tanh(GELU_C0 * x * (1.0 + GELU_C1 * x2))
    return 0.5 * x * (1.0 + t), t


def gelu_grad_from_cache(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    x2 = x * x
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x2)


def gelu_grad_array(x: np.ndarray) -> np.ndarray:
    return gelu_grad_from_cache(x, gelu_forward(x)[1])


def gelu(x) -> Tensor:
    """Elementwise GELU (tanh approximation)."""
    a = _as_array(x)
    _require_finite(a, "gelu input")
    return Tensor(gelu_array(a))


def softmax_array(v: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(v) -> np.ndarray:
    """Stable softmax over a nonempty vector."""
    a = _as_array(v)
    if a.size == 0:
        raise ShapeError("softmax of empty vector")
    _require_finite(a, "softmax input")
    return softmax_array(a, axis=-1)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    a, g, b = _as_array(x), _as_array(gamma), _as_array(beta)
    if a.shape[-1] != g.shape[-1] or a.shape[-1] != b.shape[-1]:
        raise ShapeError(
            f"layer_norm size mismatch: x last dim {a.shape[-1]}, "
            f"gamma {g.shape[-1]}, beta {b.shape[-1]}"
        )
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    xhat = xc / np.sqrt(var + eps)
    return Tensor(g * xhat + b)


def layer_norm_forward(a: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float):
    """Array-level layer norm returning (output, cache) for backprop."""
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def layer_norm_backward(dy: np.ndarray, cache):
    """Returns (dx, dgamma, dbeta); dgamma/dbeta are summed over leading dims."""
    xhat, inv, g = cache
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def grad_check(f, theta: Tensor, h: float = 1e-5) -> float:
    """Compare theta.grad (populated by f) against central differences.

    `f(theta)` must return the scalar objective and leave the analytic
    gradient in `theta.grad`. Returns the max relative error over
    coordinates, normalized by max(1, |analytic|).
    """
    if not (0.0 < h <= 1e-2):
        raise ConfigError(f"step size h={h} outside (0, 1e-2]")
    theta.zero_grad()
    base = float(f(theta))
    if not np.isfinite(base):
        raise NumericDomainError("objective is non-finite at theta")
    analytic = theta.grad.copy()
    flat = theta.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        theta.zero_grad()
        fp = float(f(theta))
        flat[i] = orig - h
        theta.zero_grad()
        fm = float(f(theta))
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    theta.zero_grad()
    f(theta)  # restore the analytic gradient for the caller
    return worst
