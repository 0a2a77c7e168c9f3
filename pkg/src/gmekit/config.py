"""Flat ``key = value`` run configuration, overridable from the command line."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields

from .discrim import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig(TrainConfig):
    data: str | None = None
    model: str | None = None
    out: str | None = None
    history: str | None = None
    enroll_mode: str = "average_vectors"
    metrics: tuple = ("eer", "avg_min_dcf")

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})


_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _convert(name, raw: str, default):
    raw = raw.strip()
    if name == "nu":
        if raw.lower() in ("none", ""):
            return None
        if raw.lower() == "inf":
            return math.inf
        return float(raw)
    if name == "metrics":
        return tuple(m.strip() for m in raw.split(",") if m.strip())
    if isinstance(default, bool):
        if raw.lower() not in _BOOL:
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    defaults = {f.name: f.default for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Config file values, then ``overrides`` (``None`` entries are ignored)."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            values.update(parse_config_text(f.read(), str(path)))
    known = {f.name for f in fields(RunConfig)}
    for k, v in (overrides or {}).items():
        if k not in known:
            raise ConfigError(f"unknown key {k!r}")
        if v is not None:
            values[k] = v
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
