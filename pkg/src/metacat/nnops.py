"""Dense float64 kernels with hand-derived backward passes.

The networks in this package are small enough that a tape-based autodiff
framework would be overkill, so every layer is a pure function and each
forward returns whatever its backward needs. All math is float64 and all
randomness comes from caller-supplied generators, which is what makes
bit-identical reruns possible.

Weight matrices use the (out_features, in_features) convention and data
moves through as batches of row vectors.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError, NoAvailableQuestionError, NumericError

# Floor applied to probabilities before they enter a log or a ratio
# denominator. Keeps policy-gradient math finite when the softmax
# saturates.
PROB_FLOOR = 1e-8

# Clamp applied to probabilities inside the cross-entropy loss.
BCE_CLAMP = 1e-12


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    # tanh form is stable for large |x| in both directions
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bce_loss(p, y):
    """Elementwise binary cross entropy with probability clamping.

    The gradient with respect to the pre-sigmoid logit is p - y; callers
    use that identity directly rather than differentiating through the
    clamp.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def affine(x, w, b):
    """x @ w.T + b for a batch of row vectors."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"affine: input width {x.shape[-1]} != {w.shape[1]}")
    return x @ w.T + b


def affine_backward(dout, x, w):
    """Gradients of an affine layer. Returns (dx, dw, db)."""
    dx = dout @ w
    dw = dout.T @ x
    db = dout.sum(axis=0) if dout.ndim > 1 else dout
    return dx, dw, db


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    return dout * (x > 0.0)


def tanh_backward(dout, t):
    """Backward through tanh given the forward output t = tanh(x)."""
    return dout * (1.0 - t * t)


def dropout_mask(rng: np.random.Generator, shape, rate: float):
    """Inverted-dropout multiplier: 0 with probability `rate`, else 1/(1-rate).

    Multiplying activations by this mask keeps their expectation unchanged,
    so evaluation mode simply skips the multiply.
    """
    if not 0.0 <= rate < 1.0:
        raise DimensionError(f"dropout rate must be in [0,1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=np.float64)
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def masked_softmax(logits, available):
    """Softmax over the available entries; masked entries are exactly 0.

    Works on a single row or a batch of rows (mask broadcastable to the
    logits). Raises NoAvailableQuestionError if any row has nothing
    available.
    """
    logits = np.asarray(logits, dtype=np.float64)
    avail = np.broadcast_to(np.asarray(available, dtype=bool), logits.shape)
    if not avail.any(axis=-1).all():
        raise NoAvailableQuestionError("masked_softmax: a row has no available entry")
    z = np.where(avail, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_backward(dprobs, probs):
    """Backward through masked_softmax.

    Masked entries have probability exactly 0, so their logit gradient is 0
    without any extra masking.
    """
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


class SgdMomentum:
    """SGD with classical momentum: v = mu*v + g, param -= lr*v."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        for name in sorted(grads):
            g = np.asarray(grads[name], dtype=np.float64)
            if not np.isfinite(g).all():
                raise NumericError(f"sgd: non-finite gradient for {name!r}")
            v = self._velocity.get(name)
            if v is None:
                v = np.zeros_like(params[name])
            v = self.momentum * v + g
            self._velocity[name] = v
            params[name] -= self.lr * v


class Adam:
    """Adam with the standard bias correction."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: dict, grads: dict) -> None:
        self._t += 1
        bc1 = 1.0 - self.beta1 ** self._t
        bc2 = 1.0 - self.beta2 ** self._t
        for name in sorted(grads):
            g = np.asarray(grads[name], dtype=np.float64)
            if not np.isfinite(g).all():
                raise NumericError(f"adam: non-finite gradient for {name!r}")
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(params[name])
                self._v[name] = np.zeros_like(params[name])
            v = self._v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            params[name] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def finite_diff_check(f: Callable[[np.ndarray], float], x, analytic,
                      h: float = 1e-5, rel_tol: float = 1e-4,
                      abs_floor: float = 1e-8):
    """Compare an analytic gradient of scalar f at x to central differences.

    A component passes when |a - n| <= rel_tol*max(|a|, |n|) + abs_floor.
    Returns (ok, worst, numeric) where worst is the largest error measured
    in units of its component tolerance (so worst <= 1 means pass).
    """
    x = np.array(x, dtype=np.float64, copy=True)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise DimensionError(
            f"gradient shape {analytic.shape} does not match input {x.shape}")
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric)
    tol = rel_tol * np.maximum(np.abs(analytic), np.abs(numeric)) + abs_floor
    worst = float((err / tol).max()) if err.size else 0.0
    return bool(worst <= 1.0), worst, numeric


def cg_solve(hvp: Callable[[np.ndarray], np.ndarray], rhs, damping: float = 0.0,
             max_iters: int | None = None, tol: float = 1e-10):
    """Conjugate gradients for (H + damping*I) x = rhs given only H's matvec.

    H must be symmetric positive semidefinite. Returns (x, iterations,
    relative residual norm). Stops once the residual drops below
    tol*||rhs|| or the iteration budget runs out; the caller can inspect
    the reported residual.
    """
    b = np.asarray(rhs, dtype=np.float64)
    x = np.zeros_like(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return x, 0, 0.0
    if max_iters is None:
        max_iters = b.size

    def amat(v):
        return hvp(v) + damping * v

    r = b - amat(x)
    p = r.copy()
    rs = float(r @ r)
    iters = 0
    for _ in range(max_iters):
        if np.sqrt(rs) <= tol * bnorm:
            break
        ap = amat(p)
        denom = float(p @ ap)
        if denom <= 0.0 or not np.isfinite(denom):
            raise NumericError("cg_solve: operator is not positive definite")
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        iters += 1
        if not np.isfinite(rs):
            raise NumericError("cg_solve: non-finite residual")
    return x, iters, float(np.sqrt(rs) / bnorm)
