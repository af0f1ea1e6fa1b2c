"""Parameter containers and the layers the model is assembled from."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError, DimensionError
from . import functional as F
from .tensor import Tensor, concat, get_default_dtype, matmul, relu


class Parameter(Tensor):
    """A trainable leaf tensor; its dotted name is assigned by the owning Module."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def trunc_normal(rng, shape, std=0.02, dtype=None):
    """Normal(0, std) samples redrawn until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype or get_default_dtype())


class Module:
    """Minimal parameter tree: attributes holding Parameters, Modules or lists of Modules."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                if value.name is None:
                    value.name = path
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != parameter shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Affine map over the last axis. ``batch`` stacks independent weights per leading index."""

    def __init__(self, n_in, n_out, rng, batch=None, zero_init=False, bias=True):
        lead = () if batch is None else (batch,)
        if zero_init:
            w = np.zeros(lead + (n_out, n_in), dtype=get_default_dtype())
        else:
            w = trunc_normal(rng, lead + (n_out, n_in))
        self.weight = Parameter(w)
        bshape = (n_out,) if batch is None else (batch, 1, n_out)
        self.bias = Parameter(np.zeros(bshape, dtype=get_default_dtype())) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d, batch=None, eps=1e-5):
        shape = (d,) if batch is None else (batch, 1, d)
        self.gamma = Parameter(np.ones(shape, dtype=get_default_dtype()))
        self.beta = Parameter(np.zeros(shape, dtype=get_default_dtype()))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over the second-to-last axis; no positional terms."""

    def __init__(self, heads, head_dim, rng, batch=None, zero_init_out=False):
        if heads < 1 or head_dim < 1:
            raise ConfigError(f"heads and head_dim must be positive, got {heads}, {head_dim}")
        self.heads, self.head_dim = heads, head_dim
        q = heads * head_dim
        self.qkv = Linear(q, 3 * q, rng, batch=batch)
        self.out = Linear(q, q, rng, batch=batch, zero_init=zero_init_out)
        self.last_attention = None
        self.keep_attention = False

    def forward(self, x):
        q_dim = self.heads * self.head_dim
        if x.shape[-1] != q_dim:
            raise ConfigError(
                f"token width {x.shape[-1]} != heads x head_dim = {self.heads} x {self.head_dim}"
            )
        lead = x.shape[:-2]
        n = x.shape[-2]
        nl = len(lead)
        qkv = self.qkv(x).reshape(lead + (n, 3, self.heads, self.head_dim))
        # -> [3, *lead, heads, n, head_dim]
        perm = (nl + 1,) + tuple(range(nl)) + (nl + 2, nl, nl + 3)
        qkv = qkv.transpose(perm)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.head_dim))
        attn = F.softmax(scores, axis=-1)
        if self.keep_attention:
            self.last_attention = attn.data
        ctx = matmul(attn, v)  # [*lead, heads, n, hd]
        perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
        ctx = ctx.transpose(perm).reshape(lead + (n, q_dim))
        return self.out(ctx)


class TransformerEncoderLayer(Module):
    """Encoder block with a 4x ReLU MLP; pre-norm by default, post-norm optional."""

    def __init__(self, heads, head_dim, rng, mlp_ratio=4, prenorm=True, batch=None, zero_init_out=False):
        q = heads * head_dim
        self.prenorm = prenorm
        self.ln1 = LayerNorm(q, batch=batch)
        self.attn = MultiHeadAttention(heads, head_dim, rng, batch=batch, zero_init_out=zero_init_out)
        self.ln2 = LayerNorm(q, batch=batch)
        self.fc1 = Linear(q, mlp_ratio * q, rng, batch=batch)
        self.fc2 = Linear(mlp_ratio * q, q, rng, batch=batch, zero_init=zero_init_out)

    def mlp(self, x):
        return self.fc2(relu(self.fc1(x)))

    def forward(self, x):
        if self.prenorm:
            x = x + self.attn(self.ln1(x))
            return x + self.mlp(self.ln2(x))
        x = self.ln1(x + self.attn(x))
        return self.ln2(x + self.mlp(x))


class Conv3d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=None, zero_init=False, std=None):
        if kernel != 1 and kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd or 1, got {kernel}")
        shape = (c_out, c_in, kernel, kernel, kernel)
        if zero_init:
            w = np.zeros(shape, dtype=get_default_dtype())
        else:
            # fan-in scaling keeps activations O(1) through the U-Net
            std = std if std is not None else math.sqrt(2.0 / (c_in * kernel**3))
            w = trunc_normal(rng, shape, std=std)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out, dtype=get_default_dtype()))
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x):
        return F.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


def cat_channels(tensors):
    return concat(tensors, axis=0)
