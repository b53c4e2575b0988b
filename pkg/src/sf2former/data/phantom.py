"""Synthetic multi-center head phantoms with a planted class signal.

Every subject gets an ellipsoidal "brain" (tissue at ``BACKGROUND``, a darker
cortical rim and two ventricles) with small per-subject shape jitter,
multiplied by a per-center gain and overlaid with center-specific Gaussian
noise. Patients additionally carry a sinusoidal grating of amplitude
``0.1 * BACKGROUND`` inside two parasagittal columns, restricted to coronal
slices ``SIGNAL_SLAB`` (1-based, inclusive).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import write_rvol
from .manifest import ManifestRow, write_manifest
from .volume import REGISTERED_SHAPE, Volume

BACKGROUND = 100.0
SIGNAL_AMPLITUDE = 0.1 * BACKGROUND
SIGNAL_SLAB = (105, 130)
GRATING_PERIOD = 24.0  # voxels, along the inferior-superior axis
CENTER_BIAS = 0.05
BASE_NOISE = 2.0


@dataclass(frozen=True)
class PhantomSubject:
    subject_id: str
    center: str
    label: str
    seed: int
    gain: float
    noise_std: float
    radii_scale: tuple[float, float, float]
    phase: float

    @property
    def is_patient(self) -> bool:
        return self.label == "patient"


def center_gains(n_centers: int, bias: float = CENTER_BIAS) -> list[float]:
    """Multiplicative intensity gains spread evenly over ``[1 - bias, 1 + bias]``."""
    if n_centers == 1:
        return [1.0]
    return [1.0 + b for b in np.linspace(-bias, bias, n_centers)]


def center_noise(n_centers: int, base: float = BASE_NOISE) -> list[float]:
    return [base * (1.0 + 0.25 * c / max(n_centers - 1, 1)) for c in range(n_centers)]


class Phantom:
    """A generated cohort. Volumes are rendered on demand from per-subject seeds."""

    def __init__(self, subjects: list[PhantomSubject], shape=REGISTERED_SHAPE, modality: str = "synthetic"):
        self.subjects = subjects
        self.shape = tuple(shape)
        self.modality = modality
        self._by_id = {s.subject_id: s for s in subjects}

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def manifest(self) -> list[ManifestRow]:
        return [ManifestRow(s.subject_id, s.label, s.center, self.modality, f"{s.subject_id}.rvol")
                for s in self.subjects]

    def volume(self, subject_id: str, signal: bool = True, noise: bool = True) -> Volume:
        return render_volume(self._by_id[subject_id], self.shape, signal=signal, noise=noise,
                             modality=self.modality)

    def load(self, row: ManifestRow) -> Volume:
        vol = self.volume(row.subject_id)
        vol.label, vol.center = row.label, row.center
        return vol

    def __iter__(self):
        for s in self.subjects:
            yield self.volume(s.subject_id)

    def write(self, directory) -> Path:
        """Write one RVOL per subject plus ``manifest.csv``; returns the manifest path."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        rows = self.manifest
        for row in rows:
            write_rvol(self.volume(row.subject_id), directory / row.path)
        out = directory / "manifest.csv"
        write_manifest(rows, out)
        return out


def gen_phantom(n_subjects: int, n_centers: int = 1, seed: int = 0, shape=REGISTERED_SHAPE,
                noise: float = BASE_NOISE, bias: float = CENTER_BIAS) -> Phantom:
    """Balanced cohort: subjects are spread over centers, and each center alternates patient/control."""
    if n_subjects < 2 or n_subjects % 2:
        raise ValueError(f"n_subjects must be an even number >= 2, got {n_subjects}")
    if n_centers < 1 or n_subjects < 2 * n_centers:
        raise ValueError(f"need at least one patient and one control per center "
                         f"({n_subjects} subjects, {n_centers} centers)")
    gains = center_gains(n_centers, bias)
    noises = center_noise(n_centers, noise)
    # subjects go to centers in pairs so every center stays label-balanced
    pairs = n_subjects // 2
    per_center = [pairs // n_centers + (1 if c < pairs % n_centers else 0) for c in range(n_centers)]
    ss = np.random.SeedSequence(seed)
    child_seeds = ss.spawn(n_subjects)
    rng = np.random.default_rng(ss.spawn(1)[0])
    subjects = []
    idx = 0
    for c, n_pairs in enumerate(per_center):
        for _ in range(n_pairs):
            for label in ("patient", "control"):
                subjects.append(PhantomSubject(
                    subject_id=f"sub-{idx:03d}",
                    center=f"C{c + 1}",
                    label=label,
                    seed=int(child_seeds[idx].generate_state(1)[0]),
                    gain=float(gains[c]),
                    noise_std=float(noises[c]),
                    radii_scale=tuple(float(v) for v in 1.0 + 0.03 * rng.uniform(-1, 1, 3)),
                    phase=float(rng.uniform(0, 2 * np.pi)),
                ))
                idx += 1
    return Phantom(subjects, shape)


def _grid(shape):
    nx, ny, nz = shape
    x = np.arange(nx, dtype=np.float32)[:, None, None]
    y = np.arange(ny, dtype=np.float32)[None, :, None]
    z = np.arange(nz, dtype=np.float32)[None, None, :]
    return x, y, z


def anatomy(subject: PhantomSubject, shape=REGISTERED_SHAPE) -> np.ndarray:
    """Noise-free template before the center gain."""
    nx, ny, nz = shape
    x, y, z = _grid(shape)
    sx, sy, sz = subject.radii_scale
    cx, cy, cz = (nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2
    rx, ry, rz = 0.38 * nx * sx, 0.41 * ny * sy, 0.40 * nz * sz
    r2 = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2
    vol = np.zeros(shape, dtype=np.float32)
    vol[r2 <= 1.0] = 0.7 * BACKGROUND
    vol[r2 <= 0.8] = BACKGROUND
    for side in (-1, 1):
        v2 = ((x - cx - side * 0.08 * nx) / (0.05 * nx)) ** 2 + ((y - cy) / (0.15 * ny)) ** 2 \
            + ((z - cz) / (0.08 * nz)) ** 2
        vol[v2 <= 1.0] = 0.3 * BACKGROUND
    return vol


def signal_mask(shape=REGISTERED_SHAPE) -> np.ndarray:
    """Boolean support of the patient grating: two columns inside the coronal slab."""
    nx, ny, nz = shape
    x, y, z = _grid(shape)
    cx = (nx - 1) / 2
    lo, hi = SIGNAL_SLAB
    in_slab = (y >= lo - 1) & (y <= hi - 1)
    columns = (np.abs(np.abs(x - cx) - 0.14 * nx) <= 0.06 * nx)
    band = (z >= 0.3 * nz) & (z <= 0.8 * nz)
    return in_slab & columns & band


def grating(subject: PhantomSubject, shape=REGISTERED_SHAPE) -> np.ndarray:
    _, _, z = _grid(shape)
    wave = SIGNAL_AMPLITUDE * np.sin(2 * np.pi * z / GRATING_PERIOD + subject.phase)
    return np.where(signal_mask(shape), wave, 0.0).astype(np.float32)


def render_volume(subject: PhantomSubject, shape=REGISTERED_SHAPE, signal: bool = True,
                  noise: bool = True, modality: str = "synthetic") -> Volume:
    data = anatomy(subject, shape) * np.float32(subject.gain)
    if noise:
        rng = np.random.default_rng(subject.seed)
        data += rng.standard_normal(shape, dtype=np.float32) * np.float32(subject.noise_std)
    if signal and subject.is_patient:
        data += grating(subject, shape)
    return Volume(data, subject_id=subject.subject_id, center=subject.center,
                  modality=modality, label=subject.label)
