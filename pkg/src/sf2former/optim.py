"""SGD with classic momentum and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Iterable

from .tensor import Parameter


def sgd_momentum_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9,
                      weight_decay: float = 0.0) -> None:
    """In place: ``v = momentum * v + grad``; ``p = p - lr * v``."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    params = list(params)
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise ValueError(f"parameters without gradients: {', '.join(missing)}")
    for p in params:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        v = p.momentum_buffer
        v *= p.dtype.type(momentum)
        v += g
        p.data -= p.dtype.type(lr) * v


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    params = list(params)
    total = math.sqrt(sum(float((p.grad.astype("float64") ** 2).sum()) for p in params))
    if total > max_norm > 0:
        factor = max_norm / total
        for p in params:
            p.grad = p.grad * p.dtype.type(factor)
    return total


def cosine_lr(epoch: int, total_epochs: int, lr_max: float = 1e-3, lr_min: float = 1e-5) -> float:
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    if lr_max < lr_min:
        raise ValueError("lr_max must be >= lr_min")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))
