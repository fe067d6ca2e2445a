"""Dense linear algebra, losses, optimizer state, and gradient verification.

Everything is float64 and pure: functions return new arrays, and the only
mutable object is the ParamStore that the optimizer updates in place
(single writer). Matrices are plain 2-D numpy arrays, row-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, SchemaError

try:  # optional fused optimizer kernel; plain numpy otherwise
    from numba import njit as _njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAS_NUMBA = False


# ---------------------------------------------------------------------------
# forward / backward primitives
# ---------------------------------------------------------------------------

def affine_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = x @ w + b with b broadcast per row. x (n, d), w (d, h), b (h,)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise SchemaError(
            f"affine shapes do not conform: x{x.shape} w{w.shape} b{b.shape}"
        )
    if not (np.isfinite(x).all() and np.isfinite(w).all() and np.isfinite(b).all()):
        raise NumericError("affine_forward: non-finite input")
    return x @ w + b


def affine_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Gradients of y = x @ w + b. Returns (dx, dw, db) for upstream g (n, h)."""
    return g @ w.T, x.T @ g, g.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(g: np.ndarray, pre: np.ndarray) -> np.ndarray:
    return g * (pre > 0.0)


def sigmoid(z):
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def dropout_mask(rng, shape, p: float) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability p, survivors scaled 1/(1-p)."""
    if p <= 0.0:
        return np.ones(shape)
    keep = ~rng.bernoulli(p, shape)
    return keep.astype(np.float64) / (1.0 - p)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def smooth_l1(pred, target, beta: float = 1.0):
    """Huber-style loss: 0.5*d^2 for |d| < beta, else |d| - 0.5*beta."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if not (np.isfinite(pred).all() and np.isfinite(target).all()):
        raise NumericError("smooth_l1: non-finite input")
    d = pred - target
    a = np.abs(d)
    out = np.where(a < beta, 0.5 * d * d, a - 0.5 * beta)
    return out if out.ndim else float(out)


def smooth_l1_grad(pred, target, beta: float = 1.0):
    """d/dpred of smooth_l1: d for |d| < beta, else sign(d)."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    out = np.where(np.abs(d) < beta, d, np.sign(d))
    return out if out.ndim else float(out)


def binary_cross_entropy(logit, label):
    """BCE against a logit, stable for large |logit|: softplus(z) - y*z.

    The hinge part max(z,0) - y*z is grouped first: it is exactly 0 or |z|
    for hard labels, so the softplus tail is not absorbed when the loss is
    tiny (saturated-correct regime).
    """
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NumericError("binary_cross_entropy: non-finite logit")
    out = np.log1p(np.exp(-np.abs(z))) + (np.maximum(z, 0.0) - y * z)
    return out if out.ndim else float(out)


def binary_cross_entropy_grad(logit, label):
    """d/dlogit of BCE = sigmoid(z) - y."""
    out = sigmoid(logit) - np.asarray(label, dtype=np.float64)
    return out if np.ndim(out) else float(out)


# ---------------------------------------------------------------------------
# parameter store and AdamW
# ---------------------------------------------------------------------------

@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    step_count: int = 0


@dataclass
class ParamStore:
    """Named parameters plus optimizer state, all shapes matching per entry."""

    entries: dict[str, Param] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        self.entries[name] = Param(
            value=value,
            grad=np.zeros_like(value),
            m1=np.zeros_like(value),
            m2=np.zeros_like(value),
        )

    def __getitem__(self, name: str) -> Param:
        return self.entries[name]

    def names(self) -> list[str]:
        return list(self.entries)

    def zero_grads(self) -> None:
        for p in self.entries.values():
            p.grad[...] = 0.0

    def clone_values(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.entries.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self.entries[k].value[...] = v


if _HAS_NUMBA:

    @_njit(cache=True)
    def _adamw_kernel(value, grad, m1, m2, lr, wd, beta1, beta2, eps, bc1, bc2):
        decay = 1.0 - lr * wd
        for i in range(value.size):
            g = grad[i]
            m1[i] = beta1 * m1[i] + (1.0 - beta1) * g
            m2[i] = beta2 * m2[i] + (1.0 - beta2) * g * g
            value[i] = value[i] * decay \
                - lr * (m1[i] / bc1) / (math.sqrt(m2[i] / bc2) + eps)

else:

    def _adamw_kernel(value, grad, m1, m2, lr, wd, beta1, beta2, eps, bc1, bc2):
        value *= 1.0 - lr * wd
        m1 *= beta1
        m1 += (1.0 - beta1) * grad
        m2 *= beta2
        m2 += (1.0 - beta2) * (grad * grad)
        denom = np.sqrt(m2 / bc2)
        denom += eps
        value -= lr * (m1 / bc1) / denom


def adamw_step(
    store: ParamStore,
    lr: float = 1e-4,
    wd: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """Decoupled weight decay (applied before the Adam update), then
    bias-corrected Adam. Leaves the store untouched if any grad is non-finite.
    """
    for name, p in store.entries.items():
        if not np.isfinite(p.grad).all():
            raise NumericError(f"adamw_step: non-finite gradient in '{name}'")
    for p in store.entries.values():
        p.step_count += 1
        t = p.step_count
        _adamw_kernel(p.value.reshape(-1), p.grad.reshape(-1),
                      p.m1.reshape(-1), p.m2.reshape(-1),
                      lr, wd, beta1, beta2, eps,
                      1.0 - beta1 ** t, 1.0 - beta2 ** t)
    return store


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(model_fn, store: ParamStore, h: float = 1e-5,
               max_per_entry: int | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    model_fn() must compute the scalar loss from the store's current values
    and write analytic gradients into store.*.grad. Relative error per
    component is |ga - gn| / max(|ga|, |gn|, 1e-8). With max_per_entry set,
    large tensors are probed at that many evenly spaced components instead
    of all of them (deterministic selection).
    """
    store.zero_grads()
    model_fn()
    analytic = {k: p.grad.copy() for k, p in store.entries.items()}
    worst = 0.0
    for name, p in store.entries.items():
        flat = p.value.reshape(-1)
        ga = analytic[name].reshape(-1)
        if max_per_entry is None or flat.size <= max_per_entry:
            indices = range(flat.size)
        else:
            indices = np.unique(np.linspace(0, flat.size - 1, max_per_entry,
                                            dtype=np.int64))
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            store.zero_grads()
            lp = model_fn()
            flat[i] = orig - h
            store.zero_grads()
            lm = model_fn()
            flat[i] = orig
            gn = (lp - lm) / (2.0 * h)
            denom = max(abs(ga[i]), abs(gn), 1e-8)
            worst = max(worst, abs(ga[i] - gn) / denom)
    store.zero_grads()
    model_fn()
    return worst
