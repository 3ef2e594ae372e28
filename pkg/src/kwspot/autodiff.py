"""Reverse-mode automatic differentiation over dense numpy arrays.

Tensors wrap row-major float arrays. Every primitive records its parents
and a backward rule; calling ``backward()`` on a scalar walks the recorded
graph once in reverse topological order, accumulating gradients additively
where a tensor fans out.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes,
a python scalar on either side, or ``(T, d) op (d,)`` row-wise. Anything
else raises ``ShapeMismatch``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import (
    InvalidAxis,
    NonDeterministicFunction,
    NonFiniteValue,
    ShapeMismatch,
)

_grad_enabled = True
_debug_checks = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class debug_checks:
    """Context manager that makes every primitive raise on NaN/Inf output."""

    def __init__(self, enabled=True):
        self._enabled = enabled

    def __enter__(self):
        global _debug_checks
        self._prev = _debug_checks
        _debug_checks = self._enabled
        return self

    def __exit__(self, *exc):
        global _debug_checks
        _debug_checks = self._prev
        return False


def set_debug_checks(enabled):
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """Dense array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Backpropagate from this node.

        ``seed`` defaults to ones and must match this tensor's shape; for
        non-scalar tensors an explicit seed is required.
        """
        if seed is None:
            if self.size != 1:
                raise ShapeMismatch(
                    "backward() without seed requires a scalar tensor, "
                    f"got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.shape:
                raise ShapeMismatch(
                    f"seed shape {seed.shape} != tensor shape {self.shape}"
                )

        order = _topo_order(self)
        grads = {id(self): seed}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                # leaf (parameter or input): expose the accumulated gradient
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _topo_order(root):
    """Reverse topological order; visits each node exactly once."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data, parents, backward):
    """Wrap a primitive's output, recording the graph when grads are on."""
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NonFiniteValue("primitive produced NaN/Inf output")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_axis(x, axis):
    if axis is not None and not (0 <= axis < x.ndim):
        raise InvalidAxis(f"axis {axis} invalid for shape {x.shape}")


# -- elementwise binary ops -------------------------------------------------


def _binary_mode(a, b):
    """Classify an elementwise pair: 'same', 'row' (matrix op vector), or error."""
    if a.shape == b.shape:
        return "same"
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return "row"
    if a.size == 1 or b.size == 1:
        return "scalar"
    raise ShapeMismatch(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(shape, g):
    """Sum grad ``g`` down to ``shape`` (undo row-wise/scalar broadcast)."""
    if g.shape == shape:
        return g
    if shape == () or shape == (1,):
        return g.sum().reshape(shape)
    # row-wise: (T, d) grad -> (d,)
    return g.sum(axis=0).reshape(shape)


def add(a, b):
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    _binary_mode(a, b)
    out = a.data + b.data

    def backward(g):
        return _reduce_to(a.shape, g), _reduce_to(b.shape, g)

    return _make(out, (a, b), backward)


def sub(a, b):
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    _binary_mode(a, b)
    out = a.data - b.data

    def backward(g):
        return _reduce_to(a.shape, g), _reduce_to(b.shape, -g)

    return _make(out, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    _binary_mode(a, b)
    out = a.data * b.data

    def backward(g):
        return _reduce_to(a.shape, g * b.data), _reduce_to(b.shape, g * a.data)

    return _make(out, (a, b), backward)


def div(a, b):
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    _binary_mode(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _reduce_to(a.shape, ga), _reduce_to(b.shape, gb)

    return _make(out, (a, b), backward)


# -- matmul / transpose ------------------------------------------------------


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), backward)


def transpose(x):
    if x.ndim != 2:
        raise ShapeMismatch(f"transpose needs a 2-D tensor, got {x.shape}")
    out = np.ascontiguousarray(x.data.T)

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return _make(out, (x,), backward)


# -- unary pointwise ---------------------------------------------------------


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward)


def log(x):
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _make(out, (x,), backward)


def sqrt(x):
    out = np.sqrt(x.data)

    def backward(g):
        return (g * (0.5 / out),)

    return _make(out, (x,), backward)


def tanh(x):
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), backward)


def sigmoid(x):
    # stable: 1/(1+exp(-x)) for x>=0, exp(x)/(1+exp(x)) for x<0
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward)


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient is 1 inside the interval, 0 outside."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)

    def backward(g):
        return (g * inside,)

    return _make(out, (x,), backward)


def gelu(x):
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    d = x.data
    phi_cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    out = d * phi_cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * d * d)
        return (g * (phi_cdf + d * pdf),)

    return _make(out, (x,), backward)


# -- reductions / softmax -----------------------------------------------------


def softmax(x, axis):
    _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), backward)


def mean(x, axis=None):
    _check_axis(x, axis)
    out = x.data.mean(axis=axis)
    n = x.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full_like(x.data, float(g) / n),)
        gx = np.expand_dims(g, axis) / n
        return (np.broadcast_to(gx, x.shape).copy(),)

    return _make(out, (x,), backward)


def variance(x, axis=None):
    """Biased variance (divide by count)."""
    _check_axis(x, axis)
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    out = (centered * centered).mean(axis=axis)
    n = x.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is None:
            return (centered * (2.0 * float(g) / n),)
        gx = np.expand_dims(g, axis)
        return (centered * (2.0 * gx / n),)

    return _make(out, (x,), backward)


def max_pool(x, axis):
    """Max-reduce along ``axis``; backward routes to the first argmax."""
    _check_axis(x, axis)
    idx = x.data.argmax(axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(
            gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
        )
        return (gx,)

    return _make(out, (x,), backward)


# -- structural ops -----------------------------------------------------------


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatch("concat of zero tensors")
    _check_axis(tensors[0], axis)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        sl = [slice(None)] * g.ndim
        for i in range(len(sizes)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _make(out, tuple(tensors), backward)


def slice_axis(x, axis, start, stop):
    _check_axis(x, axis)
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeMismatch(f"slice [{start}:{stop}] invalid for axis of length {n}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = x.data[sl].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _make(out, (x,), backward)


def gather(x, indices):
    """Select rows (axis 0); duplicate indices accumulate in backward."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise ShapeMismatch("gather indices must be 1-D")
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise ShapeMismatch("gather index out of range")
    out = x.data[indices]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, indices, g)
        return (gx,)

    return _make(out, (x,), backward)


def reshape(x, shape):
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out.copy(), (x,), backward)


def stack_rows(tensors):
    """Stack 1-D tensors of equal length into a matrix, one per row."""
    return concat([reshape(t, (1, t.size)) for t in tensors], axis=0)


# -- gradient checking --------------------------------------------------------


def grad_check(scalar_fn, params, eps=1e-4):
    """Compare reverse-mode gradients against central finite differences.

    ``scalar_fn`` takes no arguments, closes over ``params`` and returns a
    scalar Tensor. Parameters should be float64 for meaningful tolerances.
    Returns the max over all parameter elements of
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteValue("parameter contains NaN/Inf")

    out1 = scalar_fn()
    out2 = scalar_fn()
    if not np.array_equal(out1.data, out2.data):
        raise NonDeterministicFunction("two forward passes disagree")

    for p in params:
        p.zero_grad()
    out = scalar_fn()
    out.backward()
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
    ]

    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = float(scalar_fn().data)
            flat[j] = orig - eps
            f_minus = float(scalar_fn().data)
            flat[j] = orig
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            ga = float(g_ad.reshape(-1)[j])
            rel = abs(ga - g_fd) / max(1e-8, abs(ga) + abs(g_fd))
            if rel > worst:
                worst = rel
    return worst
