"""Flat ``key=value`` run configuration.

One file configures the model, the optimizer and the loss. Blank lines and
``#`` comments are ignored; unknown keys are rejected by name.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .model import SMOKE, TABLE1, ModelConfig
from .train import LossConfig, TrainConfig


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    val_fraction: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must be in (0, 1)")


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "loss": LossConfig}
_TYPES = {"val_fraction": ("", float)}
for _section, _cls in _SECTIONS.items():
    _hints = typing.get_type_hints(_cls)
    for _f in dataclasses.fields(_cls):
        _TYPES[_f.name] = (_section, _hints[_f.name])

KEYS = tuple(_TYPES)


def _parse_bool(key, text):
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {text!r}")


def parse_value(key: str, text: str):
    if key not in _TYPES:
        raise ConfigurationError(f"unknown configuration key {key!r}")
    tp = _TYPES[key][1]
    text = text.strip()
    try:
        if tp is bool:
            return _parse_bool(key, text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if typing.get_origin(tp) is tuple:
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        if typing.get_origin(tp) is typing.Union:  # Optional[int]
            return None if text.lower() in ("", "none") else int(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r}") from None
    raise ConfigurationError(f"{key}: unsupported type {tp}")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def parse_pairs(lines) -> dict[str, object]:
    values = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, text = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, text)
    return values


def build(values: dict[str, object], base: RunConfig = RunConfig()) -> RunConfig:
    groups = {name: {} for name in _SECTIONS}
    top = {}
    for key, value in values.items():
        if key not in _TYPES:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        section = _TYPES[key][0]
        (groups[section] if section else top)[key] = value
    return RunConfig(
        model=dataclasses.replace(base.model, **groups["model"]),
        train=dataclasses.replace(base.train, **groups["train"]),
        loss=dataclasses.replace(base.loss, **groups["loss"]),
        val_fraction=top.get("val_fraction", base.val_fraction),
    )


def load(path, overrides: dict[str, object] | None = None,
         base: RunConfig = RunConfig()) -> RunConfig:
    with open(path) as fh:
        values = parse_pairs(fh)
    values.update(overrides or {})
    return build(values, base)


def to_pairs(cfg) -> dict[str, object]:
    """Flatten a :class:`RunConfig` (or a single section dataclass)."""
    if isinstance(cfg, RunConfig):
        out = {}
        for name in _SECTIONS:
            out.update(to_pairs(getattr(cfg, name)))
        out["val_fraction"] = cfg.val_fraction
        return out
    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}


def dumps(cfg) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in to_pairs(cfg).items())


def save(cfg, path) -> None:
    Path(path).write_text(dumps(cfg))


# Plain literal model for reference-scale runs; the smoke preset adds residual
# connections because the literal stack collapses to a constant predictor at
# this scale (every token sees the same near-uniform attention average).
PRESETS = {
    "table1": RunConfig(model=TABLE1, train=TrainConfig()),
    "smoke": RunConfig(
        model=dataclasses.replace(SMOKE, residual=True),
        train=TrainConfig(batch_size=8, lr=1e-3, max_epochs=50, patience=50, seed=0,
                          max_steps=200),
    ),
}
