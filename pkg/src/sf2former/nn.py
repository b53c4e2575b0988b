"""Differentiable layers shared by both branches."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .tensor import Parameter, Tensor, _out, _record, as_tensor, linear

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    xd = x.data
    d = xd.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm feature size {d} does not match gamma {gamma.shape} / beta {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = centered * inv_std
    out = _out(xhat * gamma.data + beta.data, "layer_norm")

    def backward(g):
        gxhat = g * gamma.data
        gx = inv_std * (
            gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF from erf."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))
    out = _out((xd * cdf).astype(xd.dtype, copy=False), "gelu")

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf)).astype(xd.dtype, copy=False)

    return _record(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _out(y, "softmax")

    def backward(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _record(out, (x,), backward)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    ld = logits.data
    if ld.ndim != 2:
        raise ValueError(f"logits must be [B, C], got {ld.shape}")
    labels = np.asarray(labels)
    n, c = ld.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c or not np.issubdtype(labels.dtype, np.integer)):
        raise ValueError(f"labels must be integers in [0, {c}), got {labels.tolist()}")
    logp = log_softmax_np(ld)
    rows = np.arange(n)
    out = _out(np.asarray(-logp[rows, labels].mean(), dtype=ld.dtype), "cross_entropy")

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return grad * (g / n)

    return _record(out, (logits,), backward)


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two linear layers with GELU between them."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Linear:
    """A dense layer with weight ``[in, out]`` and bias ``[out]``."""

    def __init__(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Parameter(f"{name}.weight", trunc_normal(rng, (fan_in, fan_out), dtype=dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(fan_out, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class LayerNorm:
    def __init__(self, name: str, dim: int, eps: float = 1e-6, dtype=np.float32):
        self.gamma = Parameter(f"{name}.gamma", np.ones(dim, dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(dim, dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]


class MLP:
    def __init__(self, name: str, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(f"{name}.fc1", dim, hidden, rng, dtype)
        self.fc2 = Linear(f"{name}.fc2", hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return mlp(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)

    def parameters(self) -> list[Parameter]:
        return self.fc1.parameters() + self.fc2.parameters()
