"""Subject-level voting and confusion-matrix metrics (positive class = patient)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

PATIENT = 1
CONTROL = 0
METRIC_NAMES = ("ACC", "SEN", "SPE", "PRE", "F1")

# incremented whenever an even split has to be broken by the tie rule
tie_rule_calls = 0


@dataclass(frozen=True)
class Vote:
    label: int
    n_patient: int
    n_control: int
    tie_broken: bool = False


def vote(slice_predictions: Sequence[tuple[int, float]]) -> Vote:
    """Majority over ``(class, p_patient)`` pairs.

    An exact tie goes to the class with the larger mean probability; if the
    means are also equal the subject is called patient.
    """
    global tie_rule_calls
    if len(slice_predictions) == 0:
        raise ValueError("cannot vote over an empty list of slice predictions")
    classes = np.array([int(c) for c, _ in slice_predictions])
    if not np.isin(classes, (CONTROL, PATIENT)).all():
        raise ValueError(f"slice classes must be 0 or 1, got {sorted(set(classes.tolist()))}")
    n_pat = int((classes == PATIENT).sum())
    n_con = len(classes) - n_pat
    if n_pat != n_con:
        return Vote(PATIENT if n_pat > n_con else CONTROL, n_pat, n_con)
    tie_rule_calls += 1
    p = np.array([float(q) for _, q in slice_predictions])
    mean_patient, mean_control = p.mean(), (1.0 - p).mean()
    label = CONTROL if mean_control > mean_patient else PATIENT
    return Vote(label, n_pat, n_con, tie_broken=True)


def majority_vote(slice_predictions: Sequence[tuple[int, float]]) -> int:
    return vote(slice_predictions).label


@dataclass(frozen=True)
class ConfusionMatrix:
    TP: int = 0
    TN: int = 0
    FP: int = 0
    FN: int = 0

    @property
    def total(self) -> int:
        return self.TP + self.TN + self.FP + self.FN

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.TP + other.TP, self.TN + other.TN, self.FP + other.FP, self.FN + other.FN)

    def to_dict(self) -> dict:
        return asdict(self)


def confusion(pred_labels: Iterable[int], true_labels: Iterable[int]) -> ConfusionMatrix:
    pred = np.asarray(list(pred_labels), dtype=np.int64)
    true = np.asarray(list(true_labels), dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {true.size} labels")
    if pred.size == 0:
        raise ValueError("confusion matrix needs at least one prediction")
    pp, tp = pred == PATIENT, true == PATIENT
    return ConfusionMatrix(
        TP=int((pp & tp).sum()),
        TN=int((~pp & ~tp).sum()),
        FP=int((pp & ~tp).sum()),
        FN=int((~pp & tp).sum()),
    )


@dataclass(frozen=True)
class Metrics:
    ACC: float
    SEN: float
    SPE: float
    PRE: float
    F1: float
    degenerate: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in METRIC_NAMES}
        d["degenerate"] = list(self.degenerate)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(*(float(d[k]) for k in METRIC_NAMES), tuple(d.get("degenerate", ())))


def _ratio(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics(cm: ConfusionMatrix) -> Metrics:
    """ACC, SEN, SPE, PRE and F1; any 0/0 yields 0 and is listed in ``degenerate``."""
    if cm.total < 1:
        raise ValueError("metrics need a non-empty confusion matrix")
    flags: list[str] = []
    acc = (cm.TP + cm.TN) / cm.total
    sen = _ratio(cm.TP, cm.TP + cm.FN, "SEN", flags)
    spe = _ratio(cm.TN, cm.TN + cm.FP, "SPE", flags)
    pre = _ratio(cm.TP, cm.TP + cm.FP, "PRE", flags)
    f1 = _ratio(2 * pre * sen, pre + sen, "F1", flags)
    return Metrics(acc, sen, spe, pre, f1, tuple(flags))


@dataclass
class MetricsReport:
    folds: list[Metrics]
    mean: Metrics = field(init=False)

    def __post_init__(self):
        self.mean = mean_metrics(self.folds)

    def to_dict(self) -> dict:
        return {"folds": [m.to_dict() for m in self.folds], "mean": self.mean.to_dict()}


def mean_metrics(items: Sequence[Metrics]) -> Metrics:
    """Unweighted average over folds; degenerate flags are unioned."""
    if not items:
        raise ValueError("no metrics to average")
    values = [sum(getattr(m, k) for m in items) / len(items) for k in METRIC_NAMES]
    flags = sorted({f for m in items for f in m.degenerate})
    return Metrics(*values, tuple(flags))
