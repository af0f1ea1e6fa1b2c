"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import no_grad


def numerical_grad(loss_fn, tensor, step=1e-5, indices=None):
    """Central differences of scalar ``loss_fn()`` w.r.t. entries of ``tensor``.

    ``indices`` restricts the check to a subset of flat positions; other
    entries of the returned array are NaN.
    """
    data = tensor.data  # may be a non-contiguous view, so index it in place
    out = np.full(data.size, np.nan)
    positions = range(data.size) if indices is None else indices
    with no_grad():
        for i in positions:
            at = np.unravel_index(i, data.shape)
            orig = data[at]
            data[at] = orig + step
            hi = float(loss_fn().data)
            data[at] = orig - step
            lo = float(loss_fn().data)
            data[at] = orig
            out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(tensor.shape)


def relative_error(analytic, numeric):
    """Max-norm error scaled by the larger max-norm of the two gradients."""
    mask = ~np.isnan(numeric)
    a, n = np.asarray(analytic)[mask], numeric[mask]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
    return float(np.abs(a - n).max() / scale)


def check_gradients(loss_fn, tensors, step=1e-5, max_entries=None, rng=None):
    """Compare backprop and finite differences for each named tensor.

    ``tensors`` maps names to leaf tensors with ``requires_grad``. Returns a
    dict name -> relative error. With ``max_entries``, a random subset of at
    most that many positions per tensor is probed.
    """
    for t in tensors.values():
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: t.grad.copy() for name, t in tensors.items()}
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, t in tensors.items():
        idx = None
        if max_entries is not None and t.size > max_entries:
            idx = rng.choice(t.size, size=max_entries, replace=False)
        numeric = numerical_grad(loss_fn, t, step=step, indices=idx)
        errors[name] = relative_error(analytic[name], numeric)
    return errors
