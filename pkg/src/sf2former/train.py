"""Mini-batch training with SGD momentum, cosine decay and best-validation selection."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np

from .data.augment import augment_batch
from .nn import cross_entropy
from .optim import clip_grad_norm, cosine_lr, sgd_momentum_step
from .tensor import Graph, NonFiniteError, Parameter, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    momentum: float = 0.9
    seed: int = 0
    augment: bool = True
    normalize: bool = True
    pretrained: str | None = None
    majority_vote: bool = True
    branch: str = "both"
    weight_decay: float = 0.0
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr_max < self.lr_min or self.lr_min < 0:
            raise ValueError("need 0 <= lr_min <= lr_max")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class Classifier(Protocol):
    def parameters(self) -> list[Parameter]: ...

    def forward(self, x) -> Tensor: ...


@dataclass
class SliceDataset:
    images: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.subjects is not None:
            self.subjects = np.asarray(self.subjects)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float | None


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or activation."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


def evaluate_accuracy(model: Classifier, data: SliceDataset, batch_size: int = 64) -> float:
    correct = 0
    for i in range(0, len(data), batch_size):
        logits = model.forward(data.images[i:i + batch_size]).data
        correct += int((logits.argmax(axis=-1) == data.labels[i:i + batch_size]).sum())
    return correct / max(len(data), 1)


def train(model: Classifier, dataset: SliceDataset, cfg: TrainConfig, val: SliceDataset | None = None,
          select_best: bool = True) -> tuple[Classifier, list[EpochLog]]:
    """Train in place. Runs ``epochs * ceil(n / batch_size)`` steps.

    With a validation set the parameters from the epoch with the best
    validation accuracy are restored at the end (ties go to the later epoch).
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if val is not None and dataset.subjects is not None and val.subjects is not None:
        shared = set(dataset.subjects.tolist()) & set(val.subjects.tolist())
        if shared:
            raise ValueError(f"subjects in both train and validation sets: {sorted(shared)}")
    params = model.parameters()
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    history: list[EpochLog] = []
    best_acc, best_state = -1.0, None
    step = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x = dataset.images[idx]
            if cfg.augment:
                x = augment_batch(x, rng)
            y = dataset.labels[idx]
            try:
                with Graph() as graph:
                    logits = model.forward(x)
                    loss = cross_entropy(logits, y)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite forward pass at step {step}: {exc}", step) from exc
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at step {step}", step)
            graph.backward(loss, params)
            if cfg.grad_clip > 0:
                clip_grad_norm(params, cfg.grad_clip)
            sgd_momentum_step(params, lr, cfg.momentum, cfg.weight_decay)
            loss_sum += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=-1) == y).sum())
            step += 1
        val_acc = evaluate_accuracy(model, val) if val is not None and len(val) else None
        entry = EpochLog(epoch, lr, loss_sum / n, correct / n, val_acc)
        history.append(entry)
        log.debug("epoch %d lr %.2e loss %.4f acc %.3f val %s", epoch, lr, entry.train_loss,
                  entry.train_acc, val_acc)
        if select_best and val_acc is not None and val_acc >= best_acc:
            best_acc = val_acc
            best_state = [p.data.copy() for p in params]
    if best_state is not None:
        for p, saved in zip(params, best_state):
            p.data[...] = saved
    return model, history
