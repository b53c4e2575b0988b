"""Binary checkpoint files.

Layout (little-endian)::

    b"SF2F" | u32 version | u32 len | config text (key=value lines, utf-8)
    repeated until EOF:
        u32 name_len | name bytes | u8 dtype code | u32 rank | rank * u32 extents | raw data

Momentum buffers are stored as extra records named ``momentum/<param>`` when
training state is saved.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, SF2FormerModel

MAGIC = b"SF2F"
VERSION = 1
MOMENTUM_PREFIX = "momentum/"
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODE_FOR_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint. ``section`` names the part that failed."""

    def __init__(self, message: str, section: str | None = None, names: list[str] | None = None):
        super().__init__(message)
        self.section = section
        self.names = names or []


def _config_text(model: SF2FormerModel, epoch: int | None) -> str:
    lines = [f"model={json.dumps(model.config.to_dict(), sort_keys=True)}", f"dtype={model.dtype.name}"]
    if epoch is not None:
        lines.append(f"epoch={epoch}")
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}", section="config")
        out[key.strip()] = value.strip()
    return out


def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = CODE_FOR_DTYPE.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}", section="records")
    raw_name = name.encode("utf-8")
    head = struct.pack("<I", len(raw_name)) + raw_name + struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def save_checkpoint(model: SF2FormerModel, path, include_training_state: bool = False,
                    epoch: int | None = None) -> None:
    text = _config_text(model, epoch).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text]
    params = model.named_parameters()
    for name, p in params.items():
        parts.append(_record(name, p.data))
    if include_training_state:
        for name, p in params.items():
            parts.append(_record(MOMENTUM_PREFIX + name, p.momentum_buffer))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: expected {n} bytes for {section} at offset {self.pos}, "
                f"{len(self.buf) - self.pos} available", section=section)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, section: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Parse a checkpoint into its config block and named arrays, without building a model."""
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}", section="magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}", section="version")
    (text_len,) = r.unpack("<I", "config length")
    try:
        config = _parse_config_text(r.take(text_len, "config").decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointError("config block is not valid utf-8", section="config") from exc

    arrays: dict[str, np.ndarray] = {}
    index = 0
    while not r.done:
        section = f"record {index}"
        (name_len,) = r.unpack("<I", f"{section} name length")
        name = r.take(name_len, f"{section} name").decode("utf-8", errors="replace")
        section = f"record {index} ({name})"
        code, rank = r.unpack("<BI", f"{section} header")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"unknown dtype code {code} in {section}", section=section)
        shape = r.unpack(f"<{rank}I", f"{section} extents")
        dtype = DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(r.take(nbytes, f"{section} data"), dtype=dtype).reshape(shape)
        if name in arrays:
            raise CheckpointError(f"duplicate tensor name {name}", section=section, names=[name])
        arrays[name] = data.astype(dtype.newbyteorder("="))
        index += 1
    return config, arrays


def load_checkpoint(path, expected: ModelConfig | None = None) -> SF2FormerModel:
    config, arrays = read_checkpoint(path)
    if "model" not in config:
        raise CheckpointError("config block has no model entry", section="config")
    try:
        model_cfg = ModelConfig.from_dict(json.loads(config["model"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"invalid model config: {exc}", section="config") from exc
    if expected is not None and expected != model_cfg:
        raise CheckpointError("checkpoint architecture does not match the requested configuration",
                              section="config")
    model = SF2FormerModel(model_cfg, seed=0, dtype=np.dtype(config.get("dtype", "float32")))
    params = model.named_parameters()

    weights = {k: v for k, v in arrays.items() if not k.startswith(MOMENTUM_PREFIX)}
    momenta = {k[len(MOMENTUM_PREFIX):]: v for k, v in arrays.items() if k.startswith(MOMENTUM_PREFIX)}
    missing = sorted(set(params) - set(weights))
    extra = sorted(set(weights) - set(params)) + sorted(MOMENTUM_PREFIX + k for k in set(momenta) - set(params))
    if missing or extra:
        parts = []
        if missing:
            parts.append("missing: " + ", ".join(missing))
        if extra:
            parts.append("unexpected: " + ", ".join(extra))
        raise CheckpointError("parameter names do not match the architecture (" + "; ".join(parts) + ")",
                              section="records", names=missing + extra)
    for name, p in params.items():
        if weights[name].shape != p.shape:
            raise CheckpointError(f"{name}: stored shape {weights[name].shape} != expected {p.shape}",
                                  section="records", names=[name])
        p.data = weights[name].astype(model.dtype, copy=True)
        if name in momenta:
            p.momentum_buffer = momenta[name].astype(model.dtype, copy=True)
        else:
            p.momentum_buffer = np.zeros_like(p.data)
    model.epoch = int(config["epoch"]) if "epoch" in config else None
    return model


def fold_stem_channels(weight: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    """Collapse a patch-embedding weight ``[P*P*C, D]`` to one input channel.

    Feeding a grayscale slice replicated ``C`` times through the original stem
    equals feeding it once through the channel-summed weight.
    """
    d = weight.shape[-1]
    return weight.reshape(patch_size * patch_size, channels, d).sum(axis=1)


def load_pretrained(model: SF2FormerModel, path) -> list[str]:
    """Copy matching tensors from a checkpoint into ``model``; returns the names loaded.

    Tensors whose name or shape has no counterpart are skipped, so partial
    checkpoints (one branch, or a head with another class count) can seed a
    model. A 3-channel patch stem is folded onto a single-channel model.
    """
    _, arrays = read_checkpoint(path)
    params = model.named_parameters()
    stems = {"vit.patch_embed.weight": model.config.vit.patch_size,
             "gfnet.patch_embed.weight": model.config.gfnet.patch_size}
    loaded = []
    for name, arr in arrays.items():
        p = params.get(name)
        if p is None:
            continue
        if name in stems and arr.shape != p.shape and model.config.channels == 1:
            src_c = arr.shape[0] // (stems[name] ** 2)
            if arr.ndim == 2 and src_c > 1 and arr.shape[0] == src_c * stems[name] ** 2:
                arr = fold_stem_channels(arr, stems[name], src_c)
        if arr.shape == p.shape:
            p.data[...] = arr
            loaded.append(name)
    return loaded
