"""Run configuration: named presets plus ``key=value`` config files.

A config file holds one assignment per line; ``#`` starts a comment. Keys
are the fields of :class:`~sf2former.train.TrainConfig` and
:class:`~sf2former.experiment.RunConfig`, plus ``vit.<field>`` and
``gfnet.<field>`` for the architecture and ``preset`` to pick the base.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .data.volume import parse_span
from .experiment import RunConfig
from .gfnet import GfConfig
from .model import ModelConfig, full_scale_config, toy_config
from .train import TrainConfig
from .vit import VitConfig

PRESETS = ("full", "toy")


class ConfigError(ValueError):
    """A config file or override could not be applied."""


def preset(name: str) -> RunConfig:
    """``full``: full-scale model and the published schedule. ``toy``: the desk-scale phantom setup."""
    if name == "full":
        return RunConfig(model=full_scale_config(), train=TrainConfig())
    if name == "toy":
        # 32x32 slices and a 32-wide model learn much faster with a larger step;
        # 1e-3 leaves the phantom near chance after 30 epochs
        return RunConfig(model=toy_config(), train=TrainConfig(epochs=30, lr_max=1e-2))
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def _convert(value: str, kind, key: str):
    if isinstance(value, str) is False:
        return value
    text = value.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from exc
    if kind == "optional_str":
        return None if text.lower() in ("", "none") else text
    return text


def _field_kinds(cls) -> dict[str, object]:
    kinds = {}
    for f in dataclasses.fields(cls):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        if t in ("bool",):
            kinds[f.name] = bool
        elif t in ("int",):
            kinds[f.name] = int
        elif t in ("float",):
            kinds[f.name] = float
        elif "None" in t:
            kinds[f.name] = "optional_str"
        else:
            kinds[f.name] = str
    return kinds


_TRAIN_KINDS = _field_kinds(TrainConfig)
_VIT_KINDS = _field_kinds(VitConfig)
_GF_KINDS = _field_kinds(GfConfig)
_RUN_KEYS = {"manifest": "optional_str", "modality": "optional_str", "fold_seed": int, "k": int,
             "output_dir": "optional_str", "shuffle_labels": bool}
# image geometry applies to both branches at once
_SHARED_MODEL_KEYS = {"image_size": int, "patch_size": int, "channels": int}


def apply_overrides(cfg: RunConfig, values: dict[str, object]) -> RunConfig:
    """Return ``cfg`` with every ``key=value`` pair applied; unknown keys are an error."""
    train_kw, vit_kw, gf_kw, run_kw = {}, {}, {}, {}
    for key, value in values.items():
        if key == "preset":
            continue
        if key in ("span", "slices"):
            try:
                run_kw["span"] = None if value in (None, "", "default") else (
                    tuple(value) if isinstance(value, (tuple, list)) else parse_span(str(value)))
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        elif key in _SHARED_MODEL_KEYS:
            v = _convert(value, _SHARED_MODEL_KEYS[key], key)
            vit_kw[key] = gf_kw[key] = v
        elif key.startswith("vit."):
            name = key[4:]
            if name not in _VIT_KINDS:
                raise ConfigError(f"unknown key {key!r}")
            vit_kw[name] = _convert(value, _VIT_KINDS[name], key)
        elif key.startswith("gfnet."):
            name = key[6:]
            if name not in _GF_KINDS:
                raise ConfigError(f"unknown key {key!r}")
            gf_kw[name] = _convert(value, _GF_KINDS[name], key)
        elif key in _TRAIN_KINDS:
            train_kw[key] = _convert(value, _TRAIN_KINDS[key], key)
        elif key in _RUN_KEYS:
            run_kw[key] = _convert(value, _RUN_KEYS[key], key)
        else:
            raise ConfigError(f"unknown key {key!r}")
    try:
        model = cfg.model
        if vit_kw or gf_kw:
            model = ModelConfig(dataclasses.replace(model.vit, **vit_kw),
                                dataclasses.replace(model.gfnet, **gf_kw), model.branch)
        train = dataclasses.replace(cfg.train, **train_kw)
        return dataclasses.replace(cfg, model=model, train=train, **run_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path=None, preset_name: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Preset, then config file, then explicit overrides (command-line flags)."""
    values = read_config_file(path) if path else {}
    name = preset_name or values.get("preset") or "toy"
    cfg = preset(name)
    cfg = apply_overrides(cfg, values)
    return apply_overrides(cfg, overrides or {})


def config_text(cfg: RunConfig) -> str:
    """Render a RunConfig back into the ``key=value`` format."""
    lines = []
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"{f.name}={getattr(cfg.train, f.name)}")
    for prefix, sub in (("vit", cfg.model.vit), ("gfnet", cfg.model.gfnet)):
        for f in dataclasses.fields(sub):
            lines.append(f"{prefix}.{f.name}={getattr(sub, f.name)}")
    lines.append(f"span={cfg.slice_span[0]}:{cfg.slice_span[1]}")
    for key in _RUN_KEYS:
        lines.append(f"{key}={getattr(cfg, key)}")
    return "\n".join(lines) + "\n"
