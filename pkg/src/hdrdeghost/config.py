"""Plain-text key=value configuration covering model and training fields.

An empty file yields the full-scale defaults. ``preset=tiny`` switches the
model to the desk-scale preset before other keys are applied. Unknown keys
and type errors are rejected with line numbers.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .model import ModelConfig, ConfigError, full_preset, tiny_preset
from .training import TrainConfig

_PRESETS = {"full": full_preset, "tiny": tiny_preset}


def _parse_bool(v, lineno):
    low = v.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"line {lineno}: expected a boolean, got {v!r}")


def _coerce(ftype, value, lineno):
    try:
        if ftype is bool:
            return _parse_bool(value, lineno)
        if ftype is int:
            return int(value)
        if ftype is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(
            f"line {lineno}: cannot parse {value!r} as {ftype.__name__}") from None


def parse_config(path=None, text=None):
    """Returns (ModelConfig, TrainConfig) from a key=value file."""
    if text is None:
        text = Path(path).read_text() if path else ""
    model_fields = {f.name: f.type for f in fields(ModelConfig)}
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    _types = {"int": int, "float": float, "bool": bool, "str": str}

    preset = "full"
    model_kv = {}
    train_kv = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            if value not in _PRESETS:
                raise ConfigError(
                    f"line {lineno}: unknown preset {value!r} "
                    f"(choices: {sorted(_PRESETS)})")
            preset = value
        elif key in model_fields:
            ftype = _types.get(model_fields[key], str)
            model_kv[key] = _coerce(ftype, value, lineno)
        elif key in train_fields:
            ftype = _types.get(train_fields[key], str)
            train_kv[key] = _coerce(ftype, value, lineno)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")

    mcfg = _PRESETS[preset](**model_kv)
    try:
        tcfg = TrainConfig(**train_kv)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return mcfg, tcfg
