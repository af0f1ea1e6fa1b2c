"""AdamW with decoupled weight decay and a cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_step(params, grads, state, lr):
    """One in-place AdamW update.

    ``params`` and ``grads`` map names to arrays. Weight decay is applied as
    ``θ ← θ - lr·wd·θ`` before, and separately from, the bias-corrected Adam step.
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, theta in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            theta -= theta * (lr * state.weight_decay)
        m_hat = m / c1
        v_hat = v / c2
        theta -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(theta.dtype, copy=False)
    return state


class AdamW:
    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        pairs = list(named_params.items() if isinstance(named_params, dict) else named_params)
        self.params = dict(pairs)
        if len(self.params) != len(pairs):
            raise ConfigError("duplicate parameter names in optimizer")
        if len({id(p) for p in self.params.values()}) != len(pairs):
            raise ConfigError("a parameter is registered twice in the optimizer")
        self.state = AdamWState(beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr):
        arrays = {name: p.data for name, p in self.params.items()}
        grads = {name: p.grad for name, p in self.params.items()}
        adamw_step(arrays, grads, self.state, lr)


@dataclass
class LrSchedule:
    base_lr: float = 2e-4
    total_steps: int = 1
    kind: str = "cosine"

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr < 0:
            raise ConfigError(f"base_lr must be >= 0, got {self.base_lr}")

    def __call__(self, step):
        if self.kind == "constant":
            return self.base_lr
        frac = min(max(step, 0), self.total_steps) / max(self.total_steps, 1)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
