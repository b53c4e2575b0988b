"""Subject manifests: one CSV row per subject and modality."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

from .volume import LABELS

FIELDS = ("subject_id", "label", "center", "modality", "path")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRow:
    subject_id: str
    label: str
    center: str
    modality: str
    path: str

    @property
    def is_patient(self) -> bool:
        return self.label == "patient"

    @property
    def target(self) -> int:
        """Class index: 0 control, 1 patient."""
        return LABELS.index(self.label)


def validate_manifest(rows: list[ManifestRow]) -> None:
    seen: set[tuple[str, str]] = set()
    labels: dict[str, tuple[str, str]] = {}
    for i, row in enumerate(rows, start=2):
        if not row.subject_id:
            raise ManifestError(f"line {i}: empty subject_id")
        if row.label not in LABELS:
            raise ManifestError(f"line {i}: label {row.label!r} must be one of {LABELS}")
        if not row.center:
            raise ManifestError(f"line {i}: empty center for subject {row.subject_id}")
        key = (row.subject_id, row.modality)
        if key in seen:
            raise ManifestError(f"line {i}: duplicate subject {row.subject_id} for modality {row.modality}")
        seen.add(key)
        prev = labels.setdefault(row.subject_id, (row.label, row.center))
        if prev != (row.label, row.center):
            raise ManifestError(f"line {i}: subject {row.subject_id} has conflicting label/center across rows")


def read_manifest(path, resolve_paths: bool = True) -> list[ManifestRow]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(f.strip() for f in reader.fieldnames) != FIELDS:
            raise ManifestError(f"{path}: header must be {','.join(FIELDS)}, got {reader.fieldnames}")
        rows = [ManifestRow(**{k.strip(): (v or "").strip() for k, v in rec.items()}) for rec in reader]
    if resolve_paths:
        rows = [replace(r, path=str((path.parent / r.path).resolve())) if r.path and not Path(r.path).is_absolute()
                else r for r in rows]
    validate_manifest(rows)
    return rows


def write_manifest(rows: list[ManifestRow], path) -> None:
    validate_manifest(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FIELDS)
        for r in rows:
            writer.writerow([r.subject_id, r.label, r.center, r.modality, r.path])


def select_modality(rows: list[ManifestRow], modality: str | None) -> list[ManifestRow]:
    if modality is None:
        modalities = sorted({r.modality for r in rows})
        if len(modalities) > 1:
            raise ManifestError(f"manifest has several modalities {modalities}; choose one")
        return list(rows)
    picked = [r for r in rows if r.modality == modality]
    if not picked:
        raise ManifestError(f"no rows with modality {modality!r}")
    return picked
