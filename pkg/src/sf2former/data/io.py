"""Volume file readers: a NIfTI-1 subset and the internal RVOL format."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .volume import Volume

RVOL_MAGIC = b"RVOL"
RVOL_VERSION = 1

NIFTI_HEADER_SIZE = 348
NIFTI_MAGICS = (b"n+1\x00", b"ni1\x00")
# datatype code -> numpy dtype (byte order applied at read time)
NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4"}


class VolumeFormatError(ValueError):
    """A volume file could not be parsed."""


def _read_maybe_gzip(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise VolumeFormatError(f"{path}: corrupt gzip stream") from exc
    return raw


def parse_nifti_header(buf: bytes) -> dict:
    if len(buf) < NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"file too short for a NIfTI-1 header ({len(buf)} < {NIFTI_HEADER_SIZE} bytes)")
    if struct.unpack("<i", buf[:4])[0] == NIFTI_HEADER_SIZE:
        endian = "<"
    elif struct.unpack(">i", buf[:4])[0] == NIFTI_HEADER_SIZE:
        endian = ">"
    else:
        raise VolumeFormatError("sizeof_hdr is not 348 in either byte order; not a NIfTI-1 file")
    magic = buf[344:348]
    if magic not in NIFTI_MAGICS:
        raise VolumeFormatError(f"bad NIfTI magic {magic!r}, expected b'n+1\\x00' or b'ni1\\x00'")
    dim = struct.unpack(endian + "8h", buf[40:56])
    datatype, bitpix = struct.unpack(endian + "2h", buf[70:74])
    pixdim = struct.unpack(endian + "8f", buf[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(endian + "3f", buf[108:120])
    return {
        "endian": endian,
        "magic": magic,
        "dim": dim,
        "datatype": datatype,
        "bitpix": bitpix,
        "pixdim": pixdim,
        "vox_offset": vox_offset,
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
    }


def read_nifti(path, **meta) -> Volume:
    """Read a single-file NIfTI-1 volume (optionally gzip-compressed).

    Only 3-D images of type uint8, int16 or float32 are accepted. Intensity
    scaling is applied when ``scl_slope`` is non-zero.
    """
    path = Path(path)
    buf = _read_maybe_gzip(path)
    hdr = parse_nifti_header(buf)
    dim = hdr["dim"]
    if dim[0] != 3:
        raise VolumeFormatError(f"dim[0]={dim[0]}: only 3-D volumes are supported")
    code = hdr["datatype"]
    if code not in NIFTI_DTYPES:
        raise VolumeFormatError(f"unsupported NIfTI datatype code {code} (supported: 2, 4, 16)")
    shape = tuple(int(n) for n in dim[1:4])
    if min(shape) < 1:
        raise VolumeFormatError(f"non-positive extents {shape}")
    dtype = np.dtype(hdr["endian"] + NIFTI_DTYPES[code])

    if hdr["magic"] == b"ni1\x00":
        img = path.with_suffix(".img")
        if not img.exists():
            raise VolumeFormatError(f"{path}: header/image pair but {img.name} not found")
        payload, offset = _read_maybe_gzip(img), 0
    else:
        payload, offset = buf, int(hdr["vox_offset"])
        if offset < NIFTI_HEADER_SIZE:
            raise VolumeFormatError(f"vox_offset {hdr['vox_offset']} lies inside the header")
    count = int(np.prod(shape))
    if len(payload) < offset + count * dtype.itemsize:
        raise VolumeFormatError(f"truncated voxel data: need {count * dtype.itemsize} bytes at offset {offset}")
    flat = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    data = flat.reshape(shape, order="F").astype(np.float32)
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope != 0 and np.isfinite(slope):
        data = data * np.float32(slope) + np.float32(inter)
    if not np.isfinite(data).all():
        raise VolumeFormatError(f"{path}: non-finite voxel values")
    spacing = tuple(float(abs(s)) for s in hdr["pixdim"][1:4])
    return Volume(np.ascontiguousarray(data), spacing=spacing, **meta)


def write_rvol(volume: Volume | np.ndarray, path) -> None:
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if data.ndim != 3:
        raise ValueError(f"RVOL stores 3-D volumes, got shape {data.shape}")
    head = RVOL_MAGIC + struct.pack("<4I", RVOL_VERSION, *data.shape)
    Path(path).write_bytes(head + np.asarray(data, dtype="<f4").tobytes(order="F"))


def read_rvol(path, **meta) -> Volume:
    buf = Path(path).read_bytes()
    if len(buf) < 20:
        raise VolumeFormatError(f"{path}: too short for an RVOL header")
    if buf[:4] != RVOL_MAGIC:
        raise VolumeFormatError(f"{path}: bad RVOL magic {buf[:4]!r}")
    version, nx, ny, nz = struct.unpack("<4I", buf[4:20])
    if version != RVOL_VERSION:
        raise VolumeFormatError(f"{path}: unsupported RVOL version {version}")
    count = nx * ny * nz
    if len(buf) != 20 + 4 * count:
        raise VolumeFormatError(f"{path}: payload has {len(buf) - 20} bytes, expected {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=20).reshape((nx, ny, nz), order="F")
    return Volume(np.ascontiguousarray(data, dtype=np.float32), **meta)


def load_volume(path, **meta) -> Volume:
    """Read an RVOL or NIfTI-1 file, dispatching on content."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == RVOL_MAGIC:
        return read_rvol(path, **meta)
    return read_nifti(path, **meta)
