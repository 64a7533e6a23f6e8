"""Dense tensors with reverse-mode differentiation.

Every operation records its inputs and a backward closure on a dynamically
built graph; `Tensor.backward()` walks the graph in reverse topological
order and accumulates gradients as plain numpy arrays. Values are immutable
once produced by an operation; only `Parameter`s are mutated, and only by
the optimizer.

Precision is a run-level switch (`set_default_dtype`): property tests run in
double, speed runs may use single. NaN/Inf anywhere is an error state; the
cheap spot checks live in the model forward and the train step, and
`set_finite_checks(True)` turns on a guard after every single operation.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ContractError, NumericError, ShapeError

_default_dtype = np.float64
_grad_enabled = True
_finite_checks = False


def set_default_dtype(dtype) -> None:
    """Set run-level precision: 'single'/'double' or a numpy float dtype."""
    global _default_dtype
    if dtype in ("single", "float32", np.float32):
        _default_dtype = np.float32
    elif dtype in ("double", "float64", np.float64):
        _default_dtype = np.float64
    else:
        raise ValueError(f"unsupported dtype {dtype!r}")


def get_default_dtype():
    return _default_dtype


def set_finite_checks(on: bool) -> None:
    global _finite_checks
    _finite_checks = bool(on)


@contextmanager
def no_grad():
    """Disable graph recording (used by finite-difference oracles and probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _wrap(data: np.ndarray) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- graph recording -------------------------------------------------------

    def _tracked(self) -> bool:
        return self.requires_grad or self._backward is not None or bool(self._parents)

    def _accumulate(self, g: np.ndarray) -> None:
        # Gradients are never mutated in place (accumulation reallocates),
        # so adopting g without a copy is safe even when it is shared.
        if self.grad is None:
            if g.shape != self.data.shape:
                g = np.broadcast_to(g, self.data.shape)
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate gradients of all reachable tensors; self must be scalar."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar output")
        order: list[Tensor] = []
        visited = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
            node._backward = None
            node._parents = ()

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, self.dtype), self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)


class Parameter(Tensor):
    """Trainable tensor with optimizer state (first/second moments)."""

    __slots__ = ("name", "m1", "m2")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.m1 = np.zeros_like(self.data)
        self.m2 = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype or _default_dtype))


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Wrap an op result; records the graph edge only when grads are on."""
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by an operation")
    out = Tensor._wrap(data)
    if _grad_enabled and any(p._tracked() for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitive operations ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a._tracked():
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b._tracked():
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a._tracked():
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b._tracked():
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a._tracked():
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b._tracked():
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def pow_const(a, p) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out_data = a.data**p

    def backward(g):
        if a._tracked():
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a._tracked():
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if a._tracked():
            a._accumulate(g / a.data)

    return _make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a._tracked():
            a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        if a._tracked():
            a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def gelu(a) -> Tensor:
    a = as_tensor(a)
    out_data = kernels.gelu(a.data)

    def backward(g):
        if a._tracked():
            a._accumulate(kernels.gelu_backward(a.data, g))

    return _make(out_data, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(a)), stable for large |a|."""
    a = as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        if a._tracked():
            # sigmoid(a) computed stably
            a._accumulate(g * np.exp(a.data - out_data))

    return _make(out_data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a._tracked():
            if b.data.ndim == 2:
                # fold batch dims into rows: one GEMM instead of many
                g2 = g.reshape(-1, g.shape[-1])
                a._accumulate((g2 @ b.data.T).reshape(a.data.shape))
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.data.shape))
        if b._tracked():
            if b.data.ndim == 2 and a.data.ndim >= 2:
                a2 = a.data.reshape(-1, a.data.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                b._accumulate(a2.T @ g2)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a._tracked():
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis] if isinstance(axis, int) else math.prod(a.data.shape[i] for i in axis)
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a._tracked():
            a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        if a._tracked():
            a._accumulate(g.transpose(inv))

    return _make(out_data, (a,), backward)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice, type(None), type(Ellipsis))) for p in parts)


def _int_array_rows(idx):
    """Recognize pure integer-array indexing over leading axes; returns the
    tuple of index arrays or None."""
    parts = idx if isinstance(idx, tuple) else (idx,)
    arrays = []
    for p in parts:
        p = np.asarray(p) if isinstance(p, (list, np.ndarray)) else p
        if not (isinstance(p, np.ndarray) and p.dtype.kind in "iu"):
            return None
        arrays.append(p)
    return tuple(np.broadcast_arrays(*arrays)) if len(arrays) > 1 else (arrays[0],)


def take(a, idx) -> Tensor:
    """Indexing/gather; duplicate integer indices scatter-add on backward."""
    a = as_tensor(a)
    out_data = a.data[idx]

    def backward(g):
        if not a._tracked():
            return
        acc = np.zeros_like(a.data)
        if _is_basic_index(idx):
            acc[idx] += g  # basic indexing never repeats an element
        else:
            rows = _int_array_rows(idx)
            if rows is not None:
                # composite flat index + bincount: much faster than np.add.at
                lead = len(rows)
                shape = a.data.shape
                flat = rows[0].astype(np.int64).ravel()
                for k in range(1, lead):
                    flat = flat * shape[k] + rows[k].astype(np.int64).ravel()
                tail = int(np.prod(shape[lead:], dtype=np.int64)) if len(shape) > lead else 1
                gv = np.ascontiguousarray(g, dtype=acc.dtype).reshape(flat.size, tail)
                ci = (flat[:, None] * tail + np.arange(tail, dtype=np.int64)[None, :]).ravel()
                acc += np.bincount(ci, weights=gv.ravel(), minlength=acc.size).reshape(shape).astype(
                    acc.dtype, copy=False
                )
            else:
                np.add.at(acc, idx, g)
        a._accumulate(acc)

    return _make(out_data, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t._tracked():
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(out_data, tuple(tensors), backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t._tracked():
                t._accumulate(np.take(g, i, axis=axis))

    return _make(out_data, tuple(tensors), backward)


def softmax_masked(x, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along `axis` with an optional boolean mask.

    Masked entries get probability exactly 0; fully masked slices come out
    all-zero. This exactness is what keeps pseudo slots bitwise-isolated in
    the attention stack.
    """
    x = as_tensor(x)
    xd = x.data
    if axis != -1 and axis != xd.ndim - 1:
        raise ShapeError("softmax_masked operates along the last axis")
    rows = xd.reshape(-1, xd.shape[-1])
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        mrows = np.ascontiguousarray(mask.reshape(-1, xd.shape[-1]))
    else:
        mrows = None
    y = kernels.softmax_rows(np.ascontiguousarray(rows), mrows).reshape(xd.shape)

    def backward(g):
        if x._tracked():
            dy = kernels.softmax_rows_backward(
                np.ascontiguousarray(y.reshape(-1, xd.shape[-1])),
                np.ascontiguousarray(g.reshape(-1, xd.shape[-1])),
            )
            x._accumulate(dy.reshape(xd.shape))

    return _make(y, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    shifted = xd - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g):
        if x._tracked():
            soft = np.exp(out_data)
            x._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (x,), backward)


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learned gain/bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    rows = np.ascontiguousarray(xd.reshape(-1, xd.shape[-1]))
    y, mu, rstd = kernels.layernorm_rows(rows, gain.data, bias.data, eps)

    def backward(g):
        grows = np.ascontiguousarray(g.reshape(-1, xd.shape[-1]))
        dx, dgain, dbias = kernels.layernorm_rows_backward(grows, rows, gain.data, mu, rstd)
        if x._tracked():
            x._accumulate(dx.reshape(xd.shape))
        if gain._tracked():
            gain._accumulate(dgain)
        if bias._tracked():
            bias._accumulate(dbias)

    return _make(y.reshape(xd.shape), (x, gain, bias), backward)


def dropout(x, p: float, generator: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return as_tensor(x)
    keep = (generator.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor._wrap(keep))


def logsumexp(x, axis=None) -> Tensor:
    """log(sum(exp(x))) composed stably from primitives (max is detached)."""
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = add(x, Tensor._wrap(-m))
    s = tsum(exp(shifted), axis=axis, keepdims=True)
    out = add(log(s), Tensor._wrap(m))
    return reshape(out, ()) if axis is None else out


# -- contract-level operations ------------------------------------------------


def softmax(x) -> Tensor:
    """Probability-normalized exponentials of a finite real vector/array.

    Outputs are nonnegative, sum to 1 along the last axis within 1e-6, and
    the result is invariant under adding a constant to all inputs.
    """
    x = as_tensor(x)
    if x.data.size == 0:
        raise ShapeError("softmax of an empty vector")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input must be finite")
    return softmax_masked(x)


def cross_entropy_soft(logits, target) -> Tensor:
    """Cross entropy between softmax(logits) and a target distribution.

    The loss is bounded below by the target's entropy, with equality iff
    softmax(logits) equals the target.
    """
    logits = as_tensor(logits)
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target)
    if logits.data.shape[-1] != target_data.shape[-1]:
        raise ShapeError(
            f"logits/target length mismatch: {logits.data.shape[-1]} vs {target_data.shape[-1]}"
        )
    sums = target_data.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= 1e-6):
        raise NumericError("target must sum to 1 (within 1e-6)")
    logp = log_softmax(logits)
    return -tsum(mul(logp, Tensor._wrap(target_data)), axis=-1)
