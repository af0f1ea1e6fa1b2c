"""Reverse-mode differentiable tensors backed by numpy arrays.

Only the operations the odd-one-out model needs are provided. Every op
records a closure mapping the output gradient to the gradients of its
parents; :meth:`Tensor.backward` replays them in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import DimensionError, NumericError, UsageError

_state = threading.local()


def _dtype_default():
    return getattr(_state, "dtype", np.float32)


def _grad_enabled():
    return getattr(_state, "grad", True)


def get_default_dtype():
    return _dtype_default()


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (e.g. float64 for grad checks)."""
    prev = _dtype_default()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class FlopCounter:
    """Accumulates multiply-add FLOPs (2 per MAC) of matmul-like kernels."""

    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    prev = getattr(_state, "flops", None)
    _state.flops = counter
    try:
        yield counter
    finally:
        _state.flops = prev


def record_flops(n):
    counter = getattr(_state, "flops", None)
    if counter is not None:
        counter.add(n)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _dtype_default()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- autograd ---------------------------------------------------------
    def backward(self, check_finite=True):
        """Populate ``.grad`` of every leaf tensor reachable from this scalar.

        Gradients accumulate into leaves across calls; callers reset them.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("loss does not depend on any tensor with requires_grad=True")

        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        leaves = []
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                leaves.append(node)
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if check_finite:
            for leaf in leaves:
                if not np.all(np.isfinite(leaf.grad)):
                    label = leaf.name or repr(leaf)
                    raise NumericError(f"non-finite gradient in {label}")

    # -- operator overloads -----------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and not isinstance(x, np.ndarray):
        dtype = _dtype_default()
    return Tensor(x, dtype=dtype)


def make_result(data, parents, backward):
    """Wrap ``data`` as an op output and attach ``backward`` when needed.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def check_finite(t, where):
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values produced by {where}")
    return t


# -- elementwise ------------------------------------------------------------
def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _pair(a, b)

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return make_result(a.data / b.data, (a, b), bw)


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return make_result(a.data**p, (a,), bw)


def exp(a):
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return make_result(out, (a,), bw)


def log(a):
    def bw(g):
        return (g / a.data,)

    return make_result(np.log(a.data), (a,), bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return make_result(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), bw)


def sigmoid_np(x):
    """Numerically stable logistic function on raw arrays."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    s = sigmoid_np(a.data).astype(a.dtype, copy=False)

    def bw(g):
        return (g * s * (1.0 - s),)

    return make_result(s, (a,), bw)


# -- linear algebra ------------------------------------------------------------
def matmul(a, b):
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    k = a.shape[-1]
    record_flops(2 * out.size * k)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result(out, (a, b), bw)


# -- shape ops ------------------------------------------------------------------
def reshape(a, shape):
    src = a.shape

    def bw(g):
        return (g.reshape(src),)

    return make_result(a.data.reshape(shape), (a,), bw)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return make_result(np.transpose(a.data, axes), (a,), bw)


def getitem(a, index):
    src_shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return make_result(a.data[index], (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


# -- reductions ------------------------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(a.dtype, copy=True),)

    return make_result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def amax(a, axis):
    """Max along one axis; the gradient goes to the first maximal entry."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make_result(out, (a,), bw)
