"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import PRESETS, ConfigError, config_text, load_run_config
from .data import (FoldPlan, FoldPlanError, ManifestError, ManifestRow, VolumeFormatError, gen_phantom,
                   load_volume, make_folds, write_manifest, write_rvol)
from .data.volume import parse_span, select_slices
from .evaluation import vote
from .experiment import (RunConfig, SliceCache, evaluate_checkpoint, label_map, prepare_rows, run_cv,
                         sweep_slices, train_fold)
from .model import BRANCHES, predict_proba
from .tensor import NonFiniteError
from .train import TrainingError

log = logging.getLogger("sf2former")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration")
    g.add_argument("--seed", type=int, help="training and fold-plan seed")
    g.add_argument("--config", metavar="FILE", help="key=value config file")
    g.add_argument("--preset", choices=PRESETS, help="base configuration (default: toy)")
    g.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   help="override one config key; repeatable")
    g.add_argument("--slices", metavar="LO:HI", help="1-based inclusive coronal span")
    g.add_argument("--no-augment", action="store_true", help="disable flip/rotation augmentation")
    g.add_argument("--no-normalize", action="store_true", help="skip per-slice min-max normalization")
    g.add_argument("--no-vote", action="store_true", help="score slices instead of voted subjects")
    g.add_argument("--branch", choices=BRANCHES, help="feature branches feeding the head")
    g.add_argument("--shuffle-labels", action="store_true", help="permute subject labels (chance control)")
    g.add_argument("-v", "--verbose", action="count", default=0)
    src = p.add_argument_group("data source")
    src.add_argument("--manifest", metavar="CSV", help="subject manifest")
    src.add_argument("--modality", help="manifest modality to use")
    src.add_argument("--phantom", metavar="N[:C[:SEED]]",
                     help="use an in-memory phantom cohort of N subjects over C centers instead of a manifest")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = _Parser(prog="sf2former", description="Two-branch spatial/spectral slice classifier.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--subjects", type=int, default=60)
    p.add_argument("--centers", type=int, default=3)
    p.add_argument("--noise", type=float, help="base noise standard deviation")
    p.add_argument("--shape", metavar="X,Y,Z", help="volume extents (default 182,218,182)")

    p = sub.add_parser("prepare", parents=[common], help="convert volumes to RVOL and validate the manifest")
    p.add_argument("--out", required=True, help="output directory for RVOL files and manifest.csv")

    p = sub.add_parser("split", parents=[common], help="emit the fold plan as JSON")
    p.add_argument("--out", help="write the plan here instead of stdout")

    p = sub.add_parser("train", parents=[common], help="train one fold and save a checkpoint")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--plan", help="fold plan JSON (default: derived from the manifest and seed)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--no-state", action="store_true", help="omit momentum buffers from the checkpoint")

    p = sub.add_parser("eval", parents=[common], help="score one fold from a checkpoint")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--plan")
    p.add_argument("--out", help="write the fold report JSON here")

    p = sub.add_parser("cv", parents=[common], help="full k-fold cross-validation")
    p.add_argument("--out", help="directory for cv_report.json and cv_metrics.csv (default: JSON to stdout)")

    p = sub.add_parser("sweep", parents=[common], help="cross-validate over several slice spans")
    p.add_argument("--spans", required=True, metavar="LO:HI,...", help="comma-separated spans, in output order")
    p.add_argument("--out", help="directory for sweep_report.json and sweep_metrics.csv")

    p = sub.add_parser("predict", parents=[common], help="label one volume with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True, help="NIfTI or RVOL file")
    return parser


def _overrides(args) -> dict:
    values: dict[str, object] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value.strip()
    if args.seed is not None:
        values["seed"] = args.seed
        values["fold_seed"] = args.seed
    if args.slices:
        values["span"] = args.slices
    if args.no_augment:
        values["augment"] = False
    if args.no_normalize:
        values["normalize"] = False
    if args.no_vote:
        values["majority_vote"] = False
    if args.branch:
        values["branch"] = args.branch
    if args.shuffle_labels:
        values["shuffle_labels"] = True
    if args.manifest:
        values["manifest"] = args.manifest
    if args.modality:
        values["modality"] = args.modality
    return values


def _run_config(args) -> RunConfig:
    return load_run_config(args.config, args.preset, _overrides(args))


def _parse_phantom(spec: str) -> tuple[int, int, int]:
    parts = spec.split(":")
    if not 1 <= len(parts) <= 3:
        raise UsageError(f"--phantom expects N[:C[:SEED]], got {spec!r}")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"--phantom expects integers, got {spec!r}") from None
    n, c, seed = vals + [3, 0][len(vals) - 1:]
    return n, c, seed


def _data(args, cfg: RunConfig):
    """Rows plus a volume source: either the manifest's files or an in-memory phantom."""
    if args.phantom:
        if args.manifest:
            raise UsageError("give either --manifest or --phantom, not both")
        n, c, seed = _parse_phantom(args.phantom)
        try:
            ph = gen_phantom(n, c, seed=seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        return prepare_rows(cfg, ph.manifest), ph.load
    if not cfg.manifest:
        raise UsageError("no data: pass --manifest (or manifest= in the config) or --phantom")
    return prepare_rows(cfg), None


def _plan(args, cfg: RunConfig, rows) -> FoldPlan:
    if getattr(args, "plan", None):
        plan = FoldPlan.load(args.plan)
        missing = sorted({r.subject_id for r in rows} - set(plan.subjects))
        if missing:
            raise FoldPlanError(f"plan does not cover subjects {missing[:5]}")
        return plan
    return make_folds(rows, seed=cfg.fold_seed, k=cfg.k)


def _check_fold(fold: int, plan: FoldPlan) -> None:
    if not 0 <= fold < plan.k:
        raise UsageError(f"--fold must lie in [0, {plan.k - 1}], got {fold}")


def _emit(text: str, out=None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _summary(label: str, agg) -> None:
    print(f"{label}: ACC {agg.ACC:.3f} SEN {agg.SEN:.3f} SPE {agg.SPE:.3f} PRE {agg.PRE:.3f} F1 {agg.F1:.3f}",
          file=sys.stderr)


def cmd_phantom(args) -> int:
    kw = {}
    if args.noise is not None:
        kw["noise"] = args.noise
    if args.shape:
        try:
            kw["shape"] = tuple(int(v) for v in args.shape.split(","))
        except ValueError:
            raise UsageError(f"--shape expects X,Y,Z, got {args.shape!r}") from None
        if len(kw["shape"]) != 3:
            raise UsageError(f"--shape expects three extents, got {args.shape!r}")
    try:
        ph = gen_phantom(args.subjects, args.centers, seed=args.seed or 0, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    path = ph.write(args.out)
    print(path)
    return EXIT_OK


def cmd_prepare(args) -> int:
    cfg = _run_config(args)
    rows = prepare_rows(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for r in rows:
        vol = load_volume(r.path, subject_id=r.subject_id, center=r.center, modality=r.modality, label=r.label)
        name = f"{r.subject_id}_{r.modality}.rvol".replace("*", "s").replace("/", "_")
        write_rvol(vol, out / name)
        written.append(ManifestRow(r.subject_id, r.label, r.center, r.modality, name))
    write_manifest(written, out / "manifest.csv")
    print(out / "manifest.csv")
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _run_config(args)
    rows, _ = _data(args, cfg)
    _emit(_plan(args, cfg, rows).to_json(), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    rows, source = _data(args, cfg)
    plan = _plan(args, cfg, rows)
    _check_fold(args.fold, plan)
    f = plan.folds[args.fold]
    keep = set(f.train) | set(f.val)
    cache = SliceCache([r for r in rows if r.subject_id in keep], [cfg.slice_span],
                       cfg.model_config.image_size, cfg.train.normalize, source)
    model, history = train_fold(cfg, plan, args.fold, cache, label_map(cfg, rows))
    save_checkpoint(model, args.out, include_training_state=not args.no_state, epoch=len(history))
    for h in history:
        val = "-" if h.val_acc is None else f"{h.val_acc:.3f}"
        print(f"epoch {h.epoch} lr {h.lr:.2e} loss {h.train_loss:.4f} acc {h.train_acc:.3f} val {val}",
              file=sys.stderr)
    print(args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    rows, source = _data(args, cfg)
    plan = _plan(args, cfg, rows)
    _check_fold(args.fold, plan)
    res = evaluate_checkpoint(cfg, args.checkpoint, args.fold, plan, rows, source)
    report = {"config": cfg.to_dict(), "metric_level": "subject" if cfg.train.majority_vote else "slice",
              **res.to_dict()}
    _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", args.out)
    _summary(f"fold {args.fold}", res.metrics if cfg.train.majority_vote else res.slice_metrics)
    for w in res.warnings:
        log.warning(w)
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = replace(_run_config(args), output_dir=args.out)
    rows, source = _data(args, cfg)
    plan = _plan(args, cfg, rows)
    res = run_cv(cfg, rows, source, plan=plan)
    if not args.out:
        sys.stdout.write(res.to_json())
    for f in res.folds:
        for w in f.warnings:
            log.warning(w)
    _summary("aggregate", res.aggregate)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = replace(_run_config(args), output_dir=args.out)
    try:
        spans = [parse_span(s) for s in args.spans.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows, source = _data(args, cfg)
    res = sweep_slices(cfg, spans, rows, source)
    if not args.out:
        sys.stdout.write(res.to_json())
    for row in res.table():
        print(f"{row['span']}: ACC {row['ACC']:.3f} F1 {row['F1']:.3f}", file=sys.stderr)
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _run_config(args)
    model = load_checkpoint(args.checkpoint)
    vol = load_volume(args.volume)
    ss = select_slices(vol, cfg.slice_span, model.config.image_size, cfg.train.normalize)
    probs = predict_proba(model, ss.slices)
    classes = probs.argmax(axis=-1).astype(int).tolist()
    p_pat = [float(p) for p in probs[:, 1]]
    v = vote(list(zip(classes, p_pat)))
    report = {
        "volume": str(args.volume),
        "label": "patient" if v.label == 1 else "control",
        "n_patient": v.n_patient,
        "n_control": v.n_control,
        "tie_broken": v.tie_broken,
        "slices": [{"index": i, "class": c, "p_patient": p} for i, c, p in zip(ss.indices, classes, p_pat)],
    }
    sys.stdout.write(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


COMMANDS = {"phantom": cmd_phantom, "prepare": cmd_prepare, "split": cmd_split, "train": cmd_train,
            "eval": cmd_eval, "cv": cmd_cv, "sweep": cmd_sweep, "predict": cmd_predict}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"sf2former: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, NonFiniteError, FloatingPointError) as exc:
        print(f"sf2former: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ManifestError, VolumeFormatError, FoldPlanError, CheckpointError, OSError, ValueError) as exc:
        print(f"sf2former: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def debug_config(argv=None) -> str:
    """The effective ``key=value`` configuration for a command line (used by tests)."""
    args = build_parser().parse_args(argv)
    return config_text(_run_config(args))


if __name__ == "__main__":
    sys.exit(main())
