"""Pure-numpy reference implementation of the hot kernels.

Every function here has a drop-in compiled twin in `_fast.pyx`; the backend
is chosen at import time in `vlpt.kernels`. All kernels operate on 2-D row
batches (callers flatten) and preserve the input dtype (float32/float64).
"""

from __future__ import annotations

import numpy as np


def softmax_rows(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax with optional boolean mask.

    Masked-out entries get probability exactly 0; rows with no admissible
    entry come out as all-zero rows (no NaN). Stabilized by the row max over
    admissible entries, so inputs of magnitude up to ~1e4 are safe.
    """
    x = np.asarray(x)
    if mask is None:
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
        return e / e.sum(axis=1, keepdims=True)
    mask = np.asarray(mask, dtype=bool)
    neg = np.where(mask, x, -np.inf)
    m = neg.max(axis=1, keepdims=True)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(neg - safe_m), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    out = np.zeros_like(e)
    np.divide(e, denom, out=out, where=denom > 0)
    return out


def softmax_rows_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient of softmax_rows given its output y and upstream dy.

    Masked entries have y == 0 so their gradient is exactly 0.
    """
    inner = (y * dy).sum(axis=1, keepdims=True)
    return y * (dy - inner)


def layernorm_rows(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """Row-wise layer normalization. Returns (y, mean, rstd)."""
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * rstd * gain + bias
    return y, mu, rstd


def layernorm_rows_backward(dy, x, gain, mu, rstd):
    """Gradients of layernorm_rows. Returns (dx, dgain, dbias)."""
    xhat = (x - mu) * rstd
    dyg = dy * gain
    dx = rstd * (
        dyg - dyg.mean(axis=1, keepdims=True) - xhat * (dyg * xhat).mean(axis=1, keepdims=True)
    )
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    return dx, dgain, dbias


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh-approximation GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, t):
    """One fused Adam step with decoupled weight decay, in place on p/m/v.

    Gradient clipping happens before this call (it needs the global norm
    across all parameters). `t` is the 1-based timestep for bias correction.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)
