"""Flat ``key = value`` run configuration shared by all commands."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any, Optional, Union

from .synth import SynthConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


# keys that belong to neither dataclass
EXTRA_KEYS: dict[str, Any] = {
    "test_fraction": 0.3,
    "val_fraction": 0.15,
    "threshold": "0.5",  # a number, or "youden"
    "k": 5,
    "n_boot": 2000,
}


def _field_types() -> dict[str, type]:
    out: dict[str, type] = {}
    for cls in (TrainConfig, SynthConfig):
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            out[f.name] = hints[f.name]
    for k, v in EXTRA_KEYS.items():
        out[k] = type(v)
    out["threshold"] = str
    return out


KNOWN_KEYS = _field_types()


def _coerce(key: str, raw: str) -> Any:
    hint = KNOWN_KEYS[key]
    optional = typing.get_origin(hint) is Union and type(None) in typing.get_args(hint)
    if optional:
        if raw.lower() in ("none", "null", ""):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def parse_overrides(pairs: list[str]) -> dict[str, Any]:
    return parse_config("\n".join(pairs))


def load_config(path: Optional[Union[str, Path]], overrides: Optional[dict[str, Any]] = None) -> dict[str, Any]:
    values = parse_config(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update(overrides or {})
    if "threshold" in values and values["threshold"] != "youden":
        try:
            float(values["threshold"])
        except ValueError:
            raise ConfigError(f"threshold must be a number or 'youden', got {values['threshold']!r}") from None
    return values


def _build(cls, values: dict[str, Any]):
    names = {f.name for f in dataclasses.fields(cls)}
    try:
        return cls(**{k: v for k, v in values.items() if k in names})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(values: dict[str, Any]) -> TrainConfig:
    return _build(TrainConfig, values)


def synth_config(values: dict[str, Any]) -> SynthConfig:
    return _build(SynthConfig, values)


def extra(values: dict[str, Any], key: str) -> Any:
    return values.get(key, EXTRA_KEYS[key])
