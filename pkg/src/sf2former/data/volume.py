"""Volumes, coronal slice extraction, resizing and intensity normalization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import _accel

REGISTERED_SHAPE = (182, 218, 182)
CORONAL_AXIS = 1
DEFAULT_SLICE_SIZE = 224
LABELS = ("control", "patient")
MODALITIES = ("T1W", "R2*", "FLAIR", "synthetic")
# 1-based inclusive coronal ranges
DEFAULT_SPANS = {"T1W": (111, 125), "R2*": (96, 110), "FLAIR": (96, 110), "synthetic": (111, 125)}


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    subject_id: str = ""
    center: str = ""
    modality: str = "synthetic"
    label: str = "control"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"a volume is 3-D, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError(f"volume {self.subject_id!r} contains non-finite voxels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class SliceSet:
    subject_id: str
    indices: list[int]
    slices: np.ndarray = field(repr=False)
    label: str = "control"
    center: str = ""

    def __len__(self) -> int:
        return len(self.indices)


def resize_bilinear(images: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Bilinear resize of ``[H, W]`` or ``[B, H, W]`` with half-pixel centers and edge clamping."""
    images = np.asarray(images)
    single = images.ndim == 2
    stack = images[None] if single else images
    out_w = out_h if out_w is None else out_w
    _, h, w = stack.shape
    src_r = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    src_c = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    rows, cols = np.meshgrid(src_r, src_c, indexing="ij")
    out = _accel.bilinear_sample(stack, rows, cols).astype(np.float32)
    return out[0] if single else out


def normalize_slice(image: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant image maps to zeros."""
    image = np.asarray(image, dtype=np.float32)
    lo, hi = image.min(), image.max()
    if hi == lo:
        return np.zeros_like(image)
    out = (image - lo) / (hi - lo)
    # pin the extrema exactly despite rounding in the division
    out[image == lo] = 0.0
    out[image == hi] = 1.0
    return out


def coronal_slice(volume: Volume, index: int) -> np.ndarray:
    """1-based coronal slice as ``[Z, X]`` (rows run along the third axis)."""
    return volume.data[:, index - 1, :].T


def select_slices(volume: Volume, span: tuple[int, int], size: int = DEFAULT_SLICE_SIZE,
                  normalize: bool = True) -> SliceSet:
    """Extract the inclusive 1-based coronal range ``span``, resize each slice to ``size`` and normalize."""
    lo, hi = int(span[0]), int(span[1])
    n_coronal = volume.shape[CORONAL_AXIS]
    if not 1 <= lo <= hi <= n_coronal:
        raise ValueError(f"slice span {lo}:{hi} outside 1..{n_coronal}")
    stack = np.stack([coronal_slice(volume, i) for i in range(lo, hi + 1)])
    stack = resize_bilinear(stack, size)
    if normalize:
        stack = np.stack([normalize_slice(s) for s in stack])
    return SliceSet(volume.subject_id, list(range(lo, hi + 1)), stack, volume.label, volume.center)


def parse_span(text: str) -> tuple[int, int]:
    lo, sep, hi = str(text).partition(":")
    if not sep:
        raise ValueError(f"slice span must look like lo:hi, got {text!r}")
    return int(lo), int(hi)
