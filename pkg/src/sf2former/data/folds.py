"""Subject-level, center- and label-stratified k-fold planning."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import numpy as np

from .manifest import ManifestRow

DEFAULT_FOLDS = 5


@dataclass
class Fold:
    train: list[str]
    val: list[str]
    test: list[str]

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass
class FoldPlan:
    k: int
    seed: int
    folds: list[Fold]
    centers: dict[str, str] = field(default_factory=dict)
    labels: dict[str, str] = field(default_factory=dict)

    @property
    def subjects(self) -> list[str]:
        return sorted(s for f in self.folds for s in f.test)

    def to_json(self) -> str:
        payload = {
            "k": self.k,
            "seed": self.seed,
            "folds": [f.to_dict() for f in self.folds],
            "centers": self.centers,
            "labels": self.labels,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        folds = [Fold(list(f["train"]), list(f["val"]), list(f["test"])) for f in d["folds"]]
        plan = cls(int(d["k"]), int(d["seed"]), folds, dict(d.get("centers", {})), dict(d.get("labels", {})))
        check_plan(plan)
        return plan

    @classmethod
    def load(cls, path) -> "FoldPlan":
        return cls.from_json(Path(path).read_text())


class FoldPlanError(ValueError):
    pass


def _subjects(rows: Iterable[ManifestRow]) -> dict[str, tuple[str, str]]:
    out: dict[str, tuple[str, str]] = {}
    for r in rows:
        prev = out.setdefault(r.subject_id, (r.center, r.label))
        if prev != (r.center, r.label):
            raise FoldPlanError(f"subject {r.subject_id} has conflicting center/label")
    return out


def _val_count(n: int, n_test: int, available: int) -> int:
    """Validation size within one of ``n/10`` that also leaves training within one of ``7n/10``."""
    tenth = Fraction(n, 10)
    lo = max(math.ceil(tenth - 1), math.ceil(3 * tenth - n_test - 1), 0)
    hi = min(math.floor(tenth + 1), math.floor(3 * tenth - n_test + 1), available)
    want = max(1, round(tenth))
    return min(max(want, lo), hi) if lo <= hi else min(want, available)


def make_folds(rows: Iterable[ManifestRow], seed: int = 0, k: int = DEFAULT_FOLDS) -> FoldPlan:
    """Assign every subject to one test fold, stratified jointly by center and label.

    Subjects are shuffled within each (center, label) stratum, the strata are
    laid end to end in sorted order and the sequence is dealt round-robin to
    the folds. Each center therefore occupies a contiguous run and lands in
    every fold ``floor`` or ``ceil`` of its proportional share. Fold ``i``
    takes its validation subjects evenly spaced from fold ``i+1``; the count
    keeps both validation and training within one subject of 10% and 70%.
    """
    subjects = _subjects(rows)
    if k < 2:
        raise FoldPlanError("need at least two folds")
    if len(subjects) < k:
        raise FoldPlanError(f"{len(subjects)} subjects cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    strata: dict[tuple[str, str], list[str]] = defaultdict(list)
    for sid in sorted(subjects):
        strata[subjects[sid]].append(sid)
    sequence: list[str] = []
    for key in sorted(strata):
        members = strata[key]
        sequence.extend(members[i] for i in rng.permutation(len(members)))
    buckets: list[list[str]] = [[] for _ in range(k)]
    for pos, sid in enumerate(sequence):
        buckets[pos % k].append(sid)

    folds = []
    for i in range(k):
        test = buckets[i]
        nxt = buckets[(i + 1) % k]
        n_val = _val_count(len(sequence), len(test), len(nxt))
        val = [nxt[j * len(nxt) // n_val] for j in range(n_val)]
        excluded = set(test) | set(val)
        train = [s for s in sequence if s not in excluded]
        folds.append(Fold(sorted(train), sorted(val), sorted(test)))
    plan = FoldPlan(k, seed, folds,
                    centers={s: c for s, (c, _) in sorted(subjects.items())},
                    labels={s: lab for s, (_, lab) in sorted(subjects.items())})
    check_plan(plan)
    return plan


def check_plan(plan: FoldPlan) -> None:
    """Raise if any subject appears in two roles of a fold or in more than one test fold."""
    if len(plan.folds) != plan.k:
        raise FoldPlanError(f"plan declares k={plan.k} but has {len(plan.folds)} folds")
    tested: dict[str, int] = {}
    everyone: set[str] | None = None
    for i, f in enumerate(plan.folds):
        tr, va, te = set(f.train), set(f.val), set(f.test)
        if len(tr) != len(f.train) or len(va) != len(f.val) or len(te) != len(f.test):
            raise FoldPlanError(f"fold {i}: duplicate subject ids")
        for name, a, b in (("train/val", tr, va), ("train/test", tr, te), ("val/test", va, te)):
            if a & b:
                raise FoldPlanError(f"fold {i}: {name} overlap {sorted(a & b)}")
        members = tr | va | te
        if everyone is None:
            everyone = members
        elif members != everyone:
            raise FoldPlanError(f"fold {i} covers a different subject set")
        for s in te:
            if s in tested:
                raise FoldPlanError(f"subject {s} is tested in folds {tested[s]} and {i}")
            tested[s] = i
    if everyone is not None and set(tested) != everyone:
        raise FoldPlanError(f"subjects never tested: {sorted(everyone - set(tested))}")
