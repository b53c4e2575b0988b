"""Cross-validation runs, slice-range sweeps and their machine-readable reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, load_pretrained
from .data.folds import FoldPlan, make_folds
from .data.io import load_volume
from .data.manifest import ManifestRow, read_manifest, select_modality
from .data.volume import DEFAULT_SPANS, Volume, select_slices
from .evaluation import (METRIC_NAMES, ConfusionMatrix, Metrics, confusion, mean_metrics, metrics, vote)
from .model import ModelConfig, SF2FormerModel, predict_proba
from .train import EpochLog, SliceDataset, TrainConfig, train

log = logging.getLogger(__name__)

VolumeSource = Callable[[ManifestRow], Volume]


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    manifest: str | None = None
    modality: str | None = None
    span: tuple[int, int] | None = None
    fold_seed: int = 0
    k: int = 5
    output_dir: str | None = None
    shuffle_labels: bool = False

    def __post_init__(self):
        if self.span is not None:
            lo, hi = self.span
            if hi - lo + 1 < 1:
                raise ValueError(f"empty slice span {lo}:{hi}")

    @property
    def slice_span(self) -> tuple[int, int]:
        if self.span is not None:
            return tuple(self.span)
        return DEFAULT_SPANS.get(self.modality or "T1W", DEFAULT_SPANS["T1W"])

    @property
    def model_config(self) -> ModelConfig:
        return replace(self.model, branch=self.train.branch)

    def to_dict(self) -> dict:
        return {
            "model": self.model_config.to_dict(),
            "train": self.train.to_dict(),
            "manifest": self.manifest,
            "modality": self.modality,
            "span": list(self.slice_span),
            "fold_seed": self.fold_seed,
            "k": self.k,
            "shuffle_labels": self.shuffle_labels,
        }


def file_source(row: ManifestRow) -> Volume:
    return load_volume(row.path, subject_id=row.subject_id, center=row.center, modality=row.modality,
                       label=row.label)


class SliceCache:
    """Loads each subject once for a covering span and serves any sub-span from memory."""

    def __init__(self, rows: Sequence[ManifestRow], spans: Sequence[tuple[int, int]], size: int,
                 normalize: bool = True, source: VolumeSource | None = None):
        self.lo = min(s[0] for s in spans)
        self.hi = max(s[1] for s in spans)
        self.size = size
        self.normalize = normalize
        self.rows = {r.subject_id: r for r in rows}
        self._stacks: dict[str, np.ndarray] = {}
        source = source or file_source
        for r in rows:
            vol = source(r)
            self._stacks[r.subject_id] = select_slices(vol, (self.lo, self.hi), size, normalize).slices

    def slices(self, subject_id: str, span: tuple[int, int]) -> np.ndarray:
        lo, hi = span
        if lo < self.lo or hi > self.hi:
            raise ValueError(f"span {lo}:{hi} not covered by the cache ({self.lo}:{self.hi})")
        return self._stacks[subject_id][lo - self.lo:hi - self.lo + 1]


def _shuffled_labels(rows: Sequence[ManifestRow], seed: int) -> dict[str, str]:
    ids = sorted({r.subject_id for r in rows})
    labels = [next(r.label for r in rows if r.subject_id == s) for s in ids]
    perm = np.random.default_rng(seed).permutation(len(ids))
    return {s: labels[j] for s, j in zip(ids, perm)}


def _dataset(cache: SliceCache, subjects: Sequence[str], span, labels: dict[str, int]) -> SliceDataset:
    if not subjects:
        return SliceDataset(np.zeros((0, cache.size, cache.size), np.float32), np.zeros(0, np.int64))
    stacks = [cache.slices(s, span) for s in subjects]
    images = np.concatenate(stacks)
    y = np.concatenate([np.full(len(st), labels[s]) for s, st in zip(subjects, stacks)])
    subj = np.concatenate([np.full(len(st), s, dtype=object) for s, st in zip(subjects, stacks)])
    return SliceDataset(images, y, subj)


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def build_model(cfg: RunConfig, seed: int) -> SF2FormerModel:
    model = SF2FormerModel(cfg.model_config, seed=seed)
    if cfg.train.pretrained:
        loaded = load_pretrained(model, cfg.train.pretrained)
        log.info("initialized %d/%d tensors from %s", len(loaded), len(model.named_parameters()),
                 cfg.train.pretrained)
    return model


@dataclass
class SubjectResult:
    subject_id: str
    label: int
    prediction: int
    n_patient: int
    n_control: int
    tie_broken: bool
    slice_classes: list[int]
    p_patient: list[float]


@dataclass
class FoldResult:
    fold: int
    seed: int
    subjects: list[SubjectResult]
    history: list[EpochLog]
    warnings: list[str]
    confusion: ConfusionMatrix
    metrics: Metrics
    slice_confusion: ConfusionMatrix
    slice_metrics: Metrics

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "seed": self.seed,
            "confusion": self.confusion.to_dict(),
            "metrics": self.metrics.to_dict(),
            "slice_confusion": self.slice_confusion.to_dict(),
            "slice_metrics": self.slice_metrics.to_dict(),
            "warnings": self.warnings,
            "history": [asdict(h) for h in self.history],
            "subjects": [asdict(s) for s in self.subjects],
        }


def score_subjects(model: SF2FormerModel, cache: SliceCache, subjects: Sequence[str], span,
                   labels: dict[str, int]) -> list[SubjectResult]:
    out = []
    for s in subjects:
        probs = predict_proba(model, cache.slices(s, span))
        classes = probs.argmax(axis=-1).astype(int).tolist()
        p_pat = [float(p) for p in probs[:, 1]]
        v = vote(list(zip(classes, p_pat)))
        out.append(SubjectResult(s, labels[s], v.label, v.n_patient, v.n_control, v.tie_broken, classes, p_pat))
    return out


def summarize(fold: int, seed: int, subjects: list[SubjectResult], history=(), warnings=None) -> FoldResult:
    """Subject-level (voted) and slice-level confusion matrices and metrics for one fold."""
    warnings = list(warnings or [])
    truths = [s.label for s in subjects]
    for cls, name in ((1, "patient"), (0, "control")):
        if cls not in truths:
            warnings.append(f"fold {fold}: no {name} subjects in the test set")
    cm = confusion([s.prediction for s in subjects], truths)
    slice_pred = [c for s in subjects for c in s.slice_classes]
    slice_true = [s.label for s in subjects for _ in s.slice_classes]
    scm = confusion(slice_pred, slice_true)
    return FoldResult(fold, seed, subjects, list(history), warnings, cm, metrics(cm), scm, metrics(scm))


def run_fold(cfg: RunConfig, plan: FoldPlan, fold: int, cache: SliceCache, labels: dict[str, int],
             span: tuple[int, int] | None = None, model: SF2FormerModel | None = None) -> tuple[FoldResult, SF2FormerModel]:
    """Train (unless ``model`` is given) and score one fold."""
    span = span or cfg.slice_span
    seed = fold_seed(cfg.train.seed, fold)
    history: list[EpochLog] = []
    if model is None:
        model, history = train_fold(cfg, plan, fold, cache, labels, span)
    subjects = score_subjects(model, cache, plan.folds[fold].test, span, labels)
    return summarize(fold, seed, subjects, history), model


def train_fold(cfg: RunConfig, plan: FoldPlan, fold: int, cache: SliceCache, labels: dict[str, int],
               span: tuple[int, int] | None = None) -> tuple[SF2FormerModel, list[EpochLog]]:
    """Fresh model trained on the fold's train subjects, selected on its val subjects."""
    span = span or cfg.slice_span
    f = plan.folds[fold]
    seed = fold_seed(cfg.train.seed, fold)
    model = build_model(cfg, seed)
    train_set = _dataset(cache, f.train, span, labels)
    val_set = _dataset(cache, f.val, span, labels)
    return train(model, train_set, replace(cfg.train, seed=seed), val_set if len(val_set) else None)


@dataclass
class CVResult:
    config: dict
    plan: FoldPlan
    folds: list[FoldResult]
    voted: bool = True

    @property
    def aggregate(self) -> Metrics:
        return mean_metrics([f.metrics if self.voted else f.slice_metrics for f in self.folds])

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "metric_level": "subject" if self.voted else "slice",
            "fold_plan": json.loads(self.plan.to_json()),
            "folds": [f.to_dict() for f in self.folds],
            "aggregate": self.aggregate.to_dict(),
            "aggregate_subject": mean_metrics([f.metrics for f in self.folds]).to_dict(),
            "aggregate_slice": mean_metrics([f.slice_metrics for f in self.folds]).to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("fold",) + METRIC_NAMES + ("TP", "TN", "FP", "FN"))
        for f in self.folds:
            m, cm = (f.metrics, f.confusion) if self.voted else (f.slice_metrics, f.slice_confusion)
            w.writerow([f.fold] + [repr(getattr(m, k)) for k in METRIC_NAMES] + [cm.TP, cm.TN, cm.FP, cm.FN])
        agg = self.aggregate
        w.writerow(["mean"] + [repr(getattr(agg, k)) for k in METRIC_NAMES] + ["", "", "", ""])
        return buf.getvalue()

    def write(self, directory, stem: str = "cv") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        jpath, cpath = directory / f"{stem}_report.json", directory / f"{stem}_metrics.csv"
        jpath.write_text(self.to_json())
        cpath.write_text(self.metrics_csv())
        return jpath, cpath


def rescore(report: dict) -> list[dict]:
    """Recompute per-fold metrics from the raw per-slice predictions stored in a report."""
    out = []
    for f in report["folds"]:
        subjects = [SubjectResult(**s) for s in f["subjects"]]
        for s in subjects:
            s.prediction = vote(list(zip(s.slice_classes, s.p_patient))).label
        res = summarize(f["fold"], f["seed"], subjects)
        out.append({"confusion": res.confusion.to_dict(), "metrics": res.metrics.to_dict(),
                    "slice_confusion": res.slice_confusion.to_dict(), "slice_metrics": res.slice_metrics.to_dict()})
    return out


def prepare_rows(cfg: RunConfig, rows: Sequence[ManifestRow] | None = None) -> list[ManifestRow]:
    if rows is None:
        if cfg.manifest is None:
            raise ValueError("no manifest given")
        rows = read_manifest(cfg.manifest)
    return select_modality(list(rows), cfg.modality)


def label_map(cfg: RunConfig, rows: Sequence[ManifestRow]) -> dict[str, int]:
    if cfg.shuffle_labels:
        return {s: int(lab == "patient") for s, lab in _shuffled_labels(rows, cfg.fold_seed + 7919).items()}
    return {r.subject_id: r.target for r in rows}


def run_cv(cfg: RunConfig, rows: Sequence[ManifestRow] | None = None, source: VolumeSource | None = None,
           plan: FoldPlan | None = None, cache: SliceCache | None = None,
           span: tuple[int, int] | None = None) -> CVResult:
    """Full k-fold run: plan folds, train and score each fold, aggregate."""
    rows = prepare_rows(cfg, rows)
    span = span or cfg.slice_span
    plan = plan or make_folds(rows, seed=cfg.fold_seed, k=cfg.k)
    if cache is None:
        cache = SliceCache(rows, [span], cfg.model_config.image_size, cfg.train.normalize, source)
    labels = label_map(cfg, rows)
    folds = []
    for i in range(plan.k):
        res, _ = run_fold(cfg, plan, i, cache, labels, span)
        log.info("fold %d: ACC %.3f (slice ACC %.3f)", i, res.metrics.ACC, res.slice_metrics.ACC)
        folds.append(res)
    config = cfg.to_dict()
    config["span"] = list(span)
    result = CVResult(config, plan, folds, voted=cfg.train.majority_vote)
    if cfg.output_dir:
        result.write(cfg.output_dir)
    return result


@dataclass
class SweepResult:
    spans: list[tuple[int, int]]
    runs: list[CVResult]

    def table(self) -> list[dict]:
        rows = []
        for span, run in zip(self.spans, self.runs):
            agg = run.aggregate
            rows.append({"span": f"{span[0]}:{span[1]}", "n_slices": span[1] - span[0] + 1,
                         **{k: getattr(agg, k) for k in METRIC_NAMES}})
        return rows

    def to_json(self) -> str:
        payload = {"table": self.table(), "runs": [r.to_dict() for r in self.runs]}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("span", "n_slices") + METRIC_NAMES)
        for row in self.table():
            w.writerow([row["span"], row["n_slices"]] + [repr(row[k]) for k in METRIC_NAMES])
        return buf.getvalue()

    def write(self, directory) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        jpath, cpath = directory / "sweep_report.json", directory / "sweep_metrics.csv"
        jpath.write_text(self.to_json())
        cpath.write_text(self.table_csv())
        return jpath, cpath


def sweep_slices(cfg: RunConfig, spans: Sequence[tuple[int, int]], rows: Sequence[ManifestRow] | None = None,
                 source: VolumeSource | None = None) -> SweepResult:
    """Run cross-validation once per span with one shared fold plan; rows keep the input order."""
    if not spans:
        raise ValueError("no spans to sweep")
    rows = prepare_rows(cfg, rows)
    plan = make_folds(rows, seed=cfg.fold_seed, k=cfg.k)
    cache = SliceCache(rows, list(spans), cfg.model_config.image_size, cfg.train.normalize, source)
    runs = [run_cv(replace(cfg, output_dir=None), rows, plan=plan, cache=cache, span=tuple(s)) for s in spans]
    result = SweepResult([tuple(s) for s in spans], runs)
    if cfg.output_dir:
        result.write(cfg.output_dir)
    return result


def evaluate_checkpoint(cfg: RunConfig, checkpoint, fold: int, plan: FoldPlan,
                        rows: Sequence[ManifestRow] | None = None, source: VolumeSource | None = None) -> FoldResult:
    rows = prepare_rows(cfg, rows)
    model = load_checkpoint(checkpoint)
    test_rows = [r for r in rows if r.subject_id in set(plan.folds[fold].test)]
    span = cfg.slice_span
    cache = SliceCache(test_rows, [span], model.config.image_size, cfg.train.normalize, source)
    res, _ = run_fold(cfg, plan, fold, cache, label_map(cfg, rows), span, model=model)
    return res
