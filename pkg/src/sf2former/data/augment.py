"""Random flips and small rotations for training slices."""

from __future__ import annotations

import math

import numpy as np

from .. import _accel

MAX_ANGLE = 15.0
FLIP_PROB = 0.5


def _exact_trig(angle_deg: float) -> tuple[float, float]:
    # exact values at right angles keep 90/180/270 rotations free of rounding
    if float(angle_deg) % 90.0 == 0.0:
        quarter = int(round(angle_deg / 90.0)) % 4
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[quarter]
    rad = math.radians(angle_deg)
    return math.cos(rad), math.sin(rad)


def rotate(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate counter-clockwise about the image center; samples from outside are zero."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    c, s = _exact_trig(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: output pixel -> source location
    src_r = c * yy + s * xx + cy
    src_c = -s * yy + c * xx + cx
    stack = image.reshape((-1, h, w))
    out = _accel.bilinear_sample(stack, src_r, src_c)
    return out.reshape(image.shape).astype(image.dtype, copy=False)


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(image)[..., ::-1])


def augment(image: np.ndarray, rng: np.random.Generator, flip: bool | None = None,
            angle: float | None = None, max_angle: float = MAX_ANGLE, flip_prob: float = FLIP_PROB) -> np.ndarray:
    """Horizontal flip with probability ``flip_prob`` then a uniform rotation in ``[-max_angle, max_angle]``.

    ``flip`` and ``angle`` override the random draws. Output is clamped to
    [0, 1] when the input lies there, otherwise to the input's own range.
    """
    image = np.asarray(image)
    do_flip = bool(rng.random() < flip_prob) if flip is None else flip
    theta = float(rng.uniform(-max_angle, max_angle)) if angle is None else float(angle)
    out = hflip(image) if do_flip else image
    if theta != 0.0:
        out = rotate(out, theta)
    lo, hi = float(image.min()), float(image.max())
    lo, hi = (0.0, 1.0) if lo >= 0.0 and hi <= 1.0 else (min(lo, 0.0), hi)
    return np.clip(out, lo, hi).astype(image.dtype, copy=False)


def augment_batch(images: np.ndarray, rng: np.random.Generator, max_angle: float = MAX_ANGLE,
                  flip_prob: float = FLIP_PROB) -> np.ndarray:
    return np.stack([augment(img, rng, max_angle=max_angle, flip_prob=flip_prob) for img in images])
