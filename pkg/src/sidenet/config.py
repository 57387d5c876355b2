"""Training configuration and its flat ``key = value`` file format.

Keys are dotted paths into :class:`TrainConfig` (``side.dim = 16``,
``optim.lr = 1e-3``); ``#`` starts a comment. Every key can also be set from
the command line with ``--set key=value``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable

from .data import SyntheticVideoSpec
from .errors import ConfigError
from .side import SideConfig
from .text import TextConfig
from .vit import ViTConfig

TASKS = ("recognition", "retrieval")
HEADS = ("gap", "retrieval_style")
MATCHING = ("tokenwise", "global")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.15
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_epochs: int = 4
    epochs: int = 50
    batch: int = 16

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.epochs < 1 or self.warmup_epochs < 0 or self.weight_decay < 0:
            raise ConfigError("optimizer settings must be positive (warmup and weight decay non-negative)")
        if self.warmup_epochs >= self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} must be fewer than epochs {self.epochs}")


@dataclass
class TrainConfig:
    task: str = "recognition"
    seed: int = 0
    dtype: str = "f32"
    label_smoothing: float = 0.1
    head: str = "gap"
    matching: str = "tokenwise"
    num_pairs: int = 32
    data_dir: str = ""
    vit_checkpoint: str = ""
    vit: ViTConfig = field(default_factory=ViTConfig.tiny)
    side: SideConfig = field(default_factory=SideConfig)
    text: TextConfig = field(default_factory=TextConfig)
    data: SyntheticVideoSpec = field(default_factory=SyntheticVideoSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.matching not in MATCHING:
            raise ConfigError(f"matching must be one of {MATCHING}, got {self.matching!r}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.data.height != self.vit.image_size or self.data.width != self.vit.image_size:
            raise ConfigError(
                f"data resolution {self.data.height}x{self.data.width} != vit.image_size {self.vit.image_size}"
            )
        if self.data.channels != self.vit.in_chans:
            raise ConfigError(f"data.channels {self.data.channels} != vit.in_chans {self.vit.in_chans}")
        self.side.validate_against(self.vit)


def _parse_value(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {type(current).__name__})") from None
    return raw


def _flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def to_flat(cfg: TrainConfig) -> dict:
    return _flatten(cfg)


def _rebuild(obj, values: dict, prefix: str = ""):
    kwargs = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        kwargs[f.name] = _rebuild(v, values, key + ".") if dataclasses.is_dataclass(v) else values.get(key, v)
    return type(obj)(**kwargs)


def apply_overrides(cfg: TrainConfig, pairs: Iterable[tuple[str, str]]) -> TrainConfig:
    """New config with string-valued overrides applied and every section re-validated."""
    flat = to_flat(cfg)
    values = {}
    for key, raw in pairs:
        key = key.strip()
        if key not in flat:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(raw, flat[key], key)
    try:
        return _rebuild(cfg, values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def parse_config_text(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        pairs.append(parse_assignment(line))
    return pairs


def load_config(path=None, overrides: Iterable[str] = ()) -> TrainConfig:
    pairs = []
    if path:
        with open(path) as fh:
            pairs += parse_config_text(fh.read())
    pairs += [parse_assignment(o) for o in overrides]
    return apply_overrides(TrainConfig(), pairs)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in to_flat(cfg).items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
