"""Finite-difference gradient oracle used across the test suite."""

from __future__ import annotations

import numpy as np

from sf2former.tensor import Graph, Tensor

H = 1e-5
REL_TOL = 1e-4


def numeric_grad(fn, tensor: Tensor, h: float = H, max_entries: int | None = None, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor.data``.

    Returns (flat indices checked, derivative estimates).
    """
    flat = tensor.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        up = float(fn().data)
        flat[i] = old - h
        down = float(fn().data)
        flat[i] = old
        out[j] = (up - down) / (2 * h)
    return idx, out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(fn, tensors, h: float = H, max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Compare backprop gradients of scalar ``fn()`` with central differences.

    Returns the relative error per tensor (keyed by name or position).
    """
    tensors = list(tensors)
    with Graph() as g:
        loss = fn()
    g.backward(loss, tensors)
    analytic = [t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    # Gradients that vanish identically (the attention key bias, which softmax
    # cancels) would otherwise divide round-off by round-off, so the scale is
    # floored at a small fraction of the largest gradient in the check.
    floor = max(1e-8, 1e-3 * max(np.abs(a).max(initial=0.0) for a in analytic))
    errors = {}
    for k, (t, a) in enumerate(zip(tensors, analytic)):
        idx, num = numeric_grad(fn, t, h, max_entries, rng)
        errors[t.name or str(k)] = rel_error(a.reshape(-1)[idx], num, floor)
    return errors


def leaf(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
