"""Fused differentiable kernels: linear, layer norm, softmax, conv3d, losses."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, ValidationError
from .tensor import Tensor, as_tensor, make_result, record_flops, relu, sigmoid_np, unbroadcast

__all__ = [
    "linear",
    "layer_norm",
    "softmax",
    "relu",
    "conv3d",
    "upsample_nearest3d",
    "bce_loss",
    "mse_loss",
    "sparse_matmul",
    "take_flat",
]


def linear(x, weight, bias=None):
    """``y = x Wᵀ + b`` over the last axis.

    ``weight`` is ``[out, in]``, or ``[B, out, in]`` for per-batch weights
    applied to ``x`` of shape ``[B, n, in]`` (bias then ``[B, 1, out]``).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(
            f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}"
        )
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape[-1] != weight.shape[-2]:
            raise DimensionError(
                f"linear: bias shape {bias.shape} incompatible with weight shape {weight.shape}"
            )
    w = weight.data
    if w.ndim == 2:
        x2 = x.data.reshape(-1, w.shape[1])
        out = x2 @ w.T
        record_flops(2 * out.size * w.shape[1])
        out = out.reshape(x.shape[:-1] + (w.shape[0],))
    else:
        out = np.matmul(x.data, np.swapaxes(w, -1, -2))
        record_flops(2 * out.size * w.shape[-1])
    if bias is not None:
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = gw = gb = None
        if w.ndim == 2:
            g2 = g.reshape(-1, w.shape[0])
            if x.requires_grad:
                gx = (g2 @ w).reshape(x.shape)
            if weight.requires_grad:
                gw = g2.T @ x.data.reshape(-1, w.shape[1])
            if bias is not None and bias.requires_grad:
                gb = unbroadcast(g2.sum(axis=0), bias.shape)
        else:
            if x.requires_grad:
                gx = unbroadcast(np.matmul(g, w), x.shape)
            if weight.requires_grad:
                gw = unbroadcast(np.matmul(np.swapaxes(g, -1, -2), x.data), weight.shape)
            if bias is not None and bias.requires_grad:
                gb = unbroadcast(g, bias.shape)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty last dimension")
    if eps < 0:
        raise ValidationError(f"layer_norm eps must be >= 0, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            gg = unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = unbroadcast(g, beta.shape)
        return gx, gg, gb

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), bw)


def _conv_out(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x [C, X, Y, Z]`` with ``weight [Co, C, k, k, k]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 5:
        raise DimensionError(f"conv3d expects x [C,X,Y,Z] and weight [Co,C,k,k,k], got {x.shape}, {weight.shape}")
    c_in = x.shape[0]
    c_out, c_w, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if c_w != c_in:
        raise DimensionError(f"conv3d channel mismatch: input {x.shape}, weight {weight.shape}")
    if k != 1 and k % 2 == 0:
        raise DimensionError(f"conv3d kernel size must be odd or 1, got {k}")
    dims_out = tuple(_conv_out(n, k, stride, padding) for n in x.shape[1:])
    if min(dims_out) < 1:
        raise DimensionError(
            f"conv3d output would be empty: input {x.shape}, kernel {k}, stride {stride}, padding {padding}"
        )
    n_out = int(np.prod(dims_out))
    w2 = weight.data.reshape(c_out, -1)

    if k == 1 and padding == 0:
        src = x.data[:, ::stride, ::stride, ::stride]
        cols = np.ascontiguousarray(src).reshape(c_in, n_out)
    else:
        xp = np.pad(x.data, ((0, 0),) + ((padding, padding),) * 3) if padding else x.data
        win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
        win = win[:, ::stride, ::stride, ::stride][:, : dims_out[0], : dims_out[1], : dims_out[2]]
        cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(c_in * k**3, n_out)
    out = w2 @ cols
    record_flops(2 * out.size * cols.shape[0])
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
    out = out.reshape((c_out,) + dims_out)
    parents = (x, weight) if bias is None else (x, weight, bias)
    in_shape = x.shape

    def bw(g):
        g2 = g.reshape(c_out, n_out)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            gcols = w2.T @ g2
            if k == 1 and padding == 0:
                if stride == 1:
                    gx = gcols.reshape(in_shape)
                else:
                    gx = np.zeros(in_shape, dtype=g.dtype)
                    gx[:, ::stride, ::stride, ::stride] = gcols.reshape((c_in,) + dims_out)
            else:
                gcols = gcols.reshape((c_in, k, k, k) + dims_out)
                padded = tuple(n + 2 * padding for n in in_shape[1:])
                gxp = np.zeros((c_in,) + padded, dtype=g.dtype)
                ex, ey, ez = (stride * (d - 1) + 1 for d in dims_out)
                for a in range(k):
                    for b in range(k):
                        for c in range(k):
                            gxp[:, a : a + ex : stride, b : b + ey : stride, c : c + ez : stride] += gcols[:, a, b, c]
                if padding:
                    p = padding
                    gx = gxp[:, p:-p, p:-p, p:-p]
                else:
                    gx = gxp
                gx = np.ascontiguousarray(gx)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, bw)


def upsample_nearest3d(x, factor=2):
    """Nearest-neighbour upsampling of ``[C, X, Y, Z]`` by an integer factor."""
    x = as_tensor(x)
    f = int(factor)
    out = x.data.repeat(f, axis=1).repeat(f, axis=2).repeat(f, axis=3)
    c, nx, ny, nz = x.shape

    def bw(g):
        return (g.reshape(c, nx, f, ny, f, nz, f).sum(axis=(2, 4, 6)),)

    return make_result(out, (x,), bw)


def bce_loss(logits, y):
    """Summed binary cross-entropy on logits, in the fused log-sum-exp form."""
    logits = as_tensor(logits)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"bce_loss: logits {logits.shape} vs labels {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("bce_loss labels must be 0 or 1")
    x = logits.data
    terms = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    p = sigmoid_np(x).astype(x.dtype, copy=False)

    def bw(g):
        return (g * (p - y),)

    return make_result(np.asarray(terms.sum(), dtype=x.dtype), (logits,), bw)


def mse_loss(a, b):
    """Squared Euclidean distance ``||a - b||²`` (a sum, not a mean)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data

    def bw(g):
        return 2.0 * g * diff, -2.0 * g * diff

    return make_result(np.asarray((diff * diff).sum(), dtype=a.dtype), (a, b), bw)


def sparse_matmul(S, x):
    """``S @ x`` for a constant scipy sparse ``S [m, k]`` and Tensor ``x [k, d]``."""
    x = as_tensor(x)
    if S.shape[1] != x.shape[0]:
        raise DimensionError(f"sparse_matmul: matrix shape {S.shape} incompatible with input shape {x.shape}")
    out = np.asarray(S @ x.data, dtype=x.dtype)
    record_flops(2 * S.nnz * (x.shape[1] if x.ndim > 1 else 1))

    def bw(g):
        return (np.asarray(S.T @ g, dtype=x.dtype),)

    return make_result(out, (x,), bw)


def take_flat(x, index):
    """Gather ``x.reshape(-1)[index]``; gradient scatters back with accumulation."""
    x = as_tensor(x)
    index = np.asarray(index)
    out = x.data.reshape(-1)[index]

    def bw(g):
        gx = np.zeros(x.size, dtype=g.dtype)
        np.add.at(gx, index.reshape(-1), g.reshape(-1))
        return (gx.reshape(x.shape),)

    return make_result(out, (x,), bw)
