"""Discrete Fourier transforms and the learnable global filter.

Conventions: the forward transform is unnormalized, the inverse carries the
``1/(H*W)`` factor. Complex grids are plain numpy complex arrays with the two
spatial axes followed by a channel axis, optionally preceded by a batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _accel
from .tensor import Parameter, Tensor, check_finite, current_graph


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _complex_dtype(dtype) -> np.dtype:
    return np.dtype(np.complex64) if np.dtype(dtype) in (np.float32, np.complex64) else np.dtype(np.complex128)


@lru_cache(maxsize=None)
def _bluestein_plan(n: int):
    m = 1
    while m < 2 * n - 1:
        m *= 2
    k = np.arange(n)
    chirp = np.exp(-1j * np.pi * (k * k % (2 * n)) / n)
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1 :] = np.conj(chirp[1:])[::-1]
    fb = b[None, :].copy()
    _accel.fft_rows(fb)
    return m, chirp, fb[0]


def _ifft_rows_pow2(x: np.ndarray) -> None:
    np.conjugate(x, out=x)
    _accel.fft_rows(x)
    np.conjugate(x, out=x)
    x /= x.shape[1]


def _dft_rows(x: np.ndarray) -> np.ndarray:
    """Unnormalized DFT along the last axis of a 2-D complex128 array."""
    n = x.shape[1]
    if is_power_of_two(n):
        out = np.array(x, dtype=np.complex128, order="C")
        _accel.fft_rows(out)
        return out
    # Bluestein: re-express the length-n DFT as a circular convolution of power-of-two length
    m, chirp, fb = _bluestein_plan(n)
    a = np.zeros((x.shape[0], m), dtype=np.complex128)
    a[:, :n] = x * chirp
    _accel.fft_rows(a)
    a *= fb
    _ifft_rows_pow2(a)
    return a[:, :n] * chirp


def fft(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """1-D unnormalized DFT along ``axis``; any length."""
    x = np.asarray(x)
    moved = np.moveaxis(x, axis, -1)
    shape = moved.shape
    flat = np.ascontiguousarray(moved.reshape(-1, shape[-1]), dtype=np.complex128)
    out = _dft_rows(flat).reshape(shape)
    return np.moveaxis(out, -1, axis)


def ifft(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    return np.conj(fft(np.conj(x), axis=axis)) / x.shape[axis]


def _grid_axes(ndim: int) -> tuple[int, int]:
    if ndim == 3:
        return 0, 1
    if ndim == 4:
        return 1, 2
    raise ValueError(f"expected a [H, W, D] or [B, H, W, D] grid, got rank {ndim}")


def fft2(x: np.ndarray) -> np.ndarray:
    """Per-channel 2-D DFT of a token grid ``[H, W, D]`` (or ``[B, H, W, D]``)."""
    x = np.asarray(x)
    ah, aw = _grid_axes(x.ndim)
    out = fft(fft(x, axis=aw), axis=ah)
    return out.astype(_complex_dtype(x.dtype), copy=False)


def ifft2_complex(spectrum: np.ndarray) -> np.ndarray:
    spectrum = np.asarray(spectrum)
    ah, aw = _grid_axes(spectrum.ndim)
    out = ifft(ifft(spectrum, axis=aw), axis=ah)
    return out.astype(_complex_dtype(spectrum.dtype), copy=False)


def ifft2(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2`, returning the real part."""
    return np.ascontiguousarray(ifft2_complex(spectrum).real)


def hermitian_symmetrize(k: np.ndarray) -> np.ndarray:
    """Average a filter with its conjugate mirror ``conj(K[-u, -v])``.

    Filtering a real grid with the result gives a real output, identical to
    the real part of filtering with the original filter.
    """
    k = np.asarray(k)
    mirror = np.roll(np.flip(k, axis=(0, 1)), shift=(1, 1), axis=(0, 1))
    return 0.5 * (k + np.conj(mirror))


def global_filter_complex(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Filter a real grid and return the full complex inverse transform."""
    return ifft2_complex(fft2(x) * k)


@dataclass
class GlobalFilter:
    """Learnable complex filter stored as two real parameters of shape ``[H, W, D]``."""

    re: Parameter
    im: Parameter

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    @property
    def value(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    @classmethod
    def create(cls, name: str, height: int, width: int, channels: int, rng: np.random.Generator,
               std: float = 0.01, dtype=np.float32) -> "GlobalFilter":
        shape = (height, width, channels)
        re = 1.0 + std * rng.standard_normal(shape)
        im = std * rng.standard_normal(shape)
        return cls(Parameter(f"{name}.re", re.astype(dtype)), Parameter(f"{name}.im", im.astype(dtype)))

    @classmethod
    def identity(cls, name: str, height: int, width: int, channels: int, dtype=np.float32) -> "GlobalFilter":
        shape = (height, width, channels)
        return cls(Parameter(f"{name}.re", np.ones(shape, dtype)), Parameter(f"{name}.im", np.zeros(shape, dtype)))


def global_filter(x: Tensor, k_re: Tensor, k_im: Tensor) -> Tensor:
    """Real part of ``ifft2(fft2(x) * K)`` with gradients for ``x``, ``K.re`` and ``K.im``."""
    xd = x.data
    if xd.shape[-3:] != k_re.shape or k_re.shape != k_im.shape:
        raise ValueError(f"global filter shape {k_re.shape} / {k_im.shape} does not match grid {xd.shape}")
    spec = fft2(xd)
    k = k_re.data + 1j * k_im.data
    out = Tensor(ifft2(spec * k).astype(xd.dtype, copy=False))
    check_finite(out.data, "global_filter")

    graph = current_graph()
    if graph is not None:
        n = xd.shape[-3] * xd.shape[-2]
        batched = xd.ndim == 4

        def backward(g):
            g_spec = fft2(g)
            gx = ifft2(g_spec * np.conj(k)).astype(xd.dtype, copy=False)
            gk = g_spec * np.conj(spec) / n
            if batched:
                gk = gk.sum(axis=0)
            return gx, gk.real.astype(k_re.dtype, copy=False), gk.imag.astype(k_im.dtype, copy=False)

        graph.record(out, (x, k_re, k_im), backward)
    return out


def apply_filter(x: Tensor, filt: GlobalFilter) -> Tensor:
    return global_filter(x, filt.re, filt.im)


__all__ = [
    "GlobalFilter",
    "apply_filter",
    "fft",
    "fft2",
    "global_filter",
    "global_filter_complex",
    "hermitian_symmetrize",
    "ifft",
    "ifft2",
    "ifft2_complex",
    "is_power_of_two",
]
