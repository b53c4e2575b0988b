"""Hot loops with a numba path and a pure-numpy fallback.

The numba kernels are used when numba imports cleanly and the environment
variable ``SF2F_DISABLE_NUMBA`` is unset (or ``0``). Both paths compute the
same arithmetic in the same order, so results agree to rounding.
"""

from __future__ import annotations

import os
from functools import lru_cache

import numpy as np


def _numba_requested() -> bool:
    return os.environ.get("SF2F_DISABLE_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


try:
    if not _numba_requested():
        raise ImportError("numba disabled by SF2F_DISABLE_NUMBA")
    from numba import njit
except ImportError:
    njit = None

HAVE_NUMBA = njit is not None
BACKEND = "numba" if HAVE_NUMBA else "numpy"


@lru_cache(maxsize=None)
def bit_reverse_permutation(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def twiddles(n: int) -> np.ndarray:
    """exp(-2*pi*i*k/n) for k < n/2."""
    return np.exp(-2j * np.pi * np.arange(n // 2) / n)


# ---------------------------------------------------------------------------
# radix-2 FFT over the last axis of a 2-D complex128 array, in place
# ---------------------------------------------------------------------------


def _fft_rows_numpy(x: np.ndarray, rev: np.ndarray, tw: np.ndarray) -> None:
    rows, n = x.shape
    x[:] = x[:, rev]
    half = 1
    while half < n:
        step = n // (2 * half)
        w = tw[::step][:half]
        blocks = x.reshape(rows, n // (2 * half), 2, half)
        even = blocks[:, :, 0, :].copy()
        odd = blocks[:, :, 1, :] * w
        blocks[:, :, 0, :] = even + odd
        blocks[:, :, 1, :] = even - odd
        half *= 2


def _fft_rows_kernel(x, rev, tw):  # pragma: no cover - compiled
    rows, n = x.shape
    buf = np.empty(n, dtype=np.complex128)
    for r in range(rows):
        for i in range(n):
            buf[i] = x[r, rev[i]]
        half = 1
        while half < n:
            step = n // (2 * half)
            for start in range(0, n, 2 * half):
                for j in range(half):
                    odd = buf[start + half + j] * tw[j * step]
                    even = buf[start + j]
                    buf[start + j] = even + odd
                    buf[start + half + j] = even - odd
            half *= 2
        for i in range(n):
            x[r, i] = buf[i]


# ---------------------------------------------------------------------------
# bilinear sampling: out[b, i, j] = img[b] at fractional (rows[i, j], cols[i, j])
# out-of-range taps contribute zero
# ---------------------------------------------------------------------------


def _bilinear_numpy(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    nb, h, w = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros((nb,) + rows.shape, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            wgt = np.where(ok, wr * wc, 0.0)
            tap = img[:, np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
            out += wgt * tap
    return out


def _bilinear_kernel(img, rows, cols):  # pragma: no cover - compiled
    nb, h, w = img.shape
    oh, ow = rows.shape
    out = np.zeros((nb, oh, ow), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            r = rows[i, j]
            c = cols[i, j]
            r0 = int(np.floor(r))
            c0 = int(np.floor(c))
            fr = r - r0
            fc = c - c0
            for dr in range(2):
                rr = r0 + dr
                if rr < 0 or rr >= h:
                    continue
                wr = fr if dr == 1 else 1.0 - fr
                for dc in range(2):
                    cc = c0 + dc
                    if cc < 0 or cc >= w:
                        continue
                    wc = fc if dc == 1 else 1.0 - fc
                    wgt = wr * wc
                    for b in range(nb):
                        out[b, i, j] += wgt * img[b, rr, cc]
    return out


if HAVE_NUMBA:
    _fft_rows_numba = njit(cache=True)(_fft_rows_kernel)
    _bilinear_numba = njit(cache=True)(_bilinear_kernel)
else:
    _fft_rows_numba = None
    _bilinear_numba = None


def fft_rows(x: np.ndarray, backend: str | None = None) -> None:
    """Unnormalized forward DFT of every row of ``x`` (complex128, C-contiguous), in place.

    Row length must be a power of two.
    """
    n = x.shape[1]
    rev = bit_reverse_permutation(n)
    tw = twiddles(n)
    if (backend or BACKEND) == "numba":
        if _fft_rows_numba is None:
            raise RuntimeError("numba backend requested but numba is unavailable")
        _fft_rows_numba(x, rev, tw)
    else:
        _fft_rows_numpy(x, rev, tw)


def bilinear_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Sample a stack of images ``[B, H, W]`` at fractional coordinates, zero outside."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    if (backend or BACKEND) == "numba":
        if _bilinear_numba is None:
            raise RuntimeError("numba backend requested but numba is unavailable")
        return _bilinear_numba(img, rows, cols)
    return _bilinear_numpy(img, rows, cols)
