"""Run configuration: nested dataclasses, file loading, overrides and validation.

Every key has a default, so an empty file is a valid configuration. Errors are
raised as :class:`~tcpl.exceptions.ConfigError` carrying the dotted key name.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .exceptions import ConfigError

CRITERIA = ("confidence", "prediction", "prototype")


def default_augment_ops():
    return [
        {"op": "resized_crop", "scale": [0.75, 1.0], "ratio": [0.85, 1.18]},
        {"op": "hflip", "p": 0.5},
        {"op": "color_jitter", "brightness": 0.2, "contrast": 0.2, "saturation": 0.2, "hue": 0.03},
        {"op": "cutout", "fraction": 0.25, "p": 0.5},
    ]


@dataclass
class LossWeights:
    lambda1: float = 0.88
    lambda2: float = 1e-4
    eta: float = 1.0


@dataclass
class Thresholds:
    V: float = 0.97
    q: int = 4


@dataclass
class BatchSizes:
    source: int = 32
    target_pl: int = 32


@dataclass
class ShiftConfig:
    hue_delta: float = 0.0
    texture_noise: float = 0.0
    background_swap: float = 0.0


@dataclass
class SyntheticConfig:
    C: int = 3
    per_class: int = 50
    image_size: int = 32
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    seed: int = 0


@dataclass
class DataConfig:
    synthetic: Optional[SyntheticConfig] = field(default_factory=SyntheticConfig)
    source: Optional[str] = None
    target: Optional[str] = None
    image_size: Optional[int] = None


@dataclass
class TrainConfig:
    epochs: int = 250
    epoch_update_proto: int = 120
    lr0: float = 0.002
    lr_decay_every: int = 50
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    batch_size: BatchSizes = field(default_factory=BatchSizes)
    loss: LossWeights = field(default_factory=LossWeights)
    thresholds: Thresholds = field(default_factory=Thresholds)
    pool_sizes: list = field(default_factory=lambda: [1, 2, 3])
    M: int = 3
    D: int = 64
    backbone_channels: list = field(default_factory=lambda: [16, 32, 64])
    seed: int = 0
    # ablation switches
    pseudo_label: bool = True
    criteria: list = field(default_factory=lambda: list(CRITERIA))
    cdpd_attract: str = "min"
    prototype_block_multiplier: str = "M"
    # augmentation committee and augmented-loss views
    augment: list = field(default_factory=default_augment_ops)
    train_augment: Optional[list] = None
    box_rule: str = "percentile"
    box_percentile: float = 95.0
    checkpoint_every: int = 50
    write_audit: bool = True
    dtype: str = "float32"
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "TrainConfig":
        _check(self.epochs >= 0, "epochs", "must be >= 0")
        _check(self.epoch_update_proto >= 0, "epoch_update_proto", "must be >= 0")
        _check(self.epochs == 0 or self.epoch_update_proto < self.epochs,
               "epoch_update_proto", "must be < epochs")
        _check(self.lr0 > 0, "lr0", "must be positive")
        _check(self.lr_decay_every > 0, "lr_decay_every", "must be positive")
        _check(self.lr_decay_factor > 0, "lr_decay_factor", "must be positive")
        _check(0 <= self.momentum < 1, "momentum", "must be in [0, 1)")
        _check(self.batch_size.source >= 1, "batch_size.source", "must be >= 1")
        _check(self.batch_size.target_pl >= 0, "batch_size.target_pl", "must be >= 0")
        for name in ("lambda1", "lambda2", "eta"):
            _check(getattr(self.loss, name) >= 0, f"loss.{name}", "must be >= 0")
        _check(0 < self.thresholds.V < 1, "thresholds.V", f"must be in (0, 1), got {self.thresholds.V}")
        _check(self.thresholds.q >= 1, "thresholds.q", "must be >= 1")
        _check(len(self.pool_sizes) >= 1 and all(int(k) >= 1 for k in self.pool_sizes),
               "pool_sizes", "need at least one pool size, each >= 1")
        _check(self.M >= 1, "M", "must be >= 1")
        _check(self.D >= 1, "D", "must be >= 1")
        _check(len(self.backbone_channels) >= 1, "backbone_channels", "must not be empty")
        _check(set(self.criteria) <= set(CRITERIA) and len(self.criteria) >= 1,
               "criteria", f"subset of {CRITERIA}")
        _check(self.cdpd_attract in ("min", "max"), "cdpd_attract", "must be 'min' or 'max'")
        _check(self.prototype_block_multiplier in ("M", "N"), "prototype_block_multiplier",
               "must be 'M' or 'N'")
        _check(self.box_rule in ("percentile", "fraction_of_max"), "box_rule",
               "must be 'percentile' or 'fraction_of_max'")
        _check(0 < self.box_percentile <= 100, "box_percentile", "must be in (0, 100]")
        _check(self.checkpoint_every >= 1, "checkpoint_every", "must be >= 1")
        _check(self.dtype in ("float32", "float64"), "dtype", "must be float32 or float64")
        syn = self.data.synthetic
        if self.data.source is None:
            _check(syn is not None, "data", "either data.synthetic or data.source is required")
        if syn is not None and self.data.source is None:
            _check(syn.C >= 2, "data.synthetic.C", "must be >= 2")
            _check(syn.per_class >= 4, "data.synthetic.per_class", "must be >= 4")
            _check(syn.image_size >= 32, "data.synthetic.image_size", "must be >= 32")
            for name in ("hue_delta", "texture_noise", "background_swap"):
                _check(getattr(syn.shift, name) >= 0, f"data.synthetic.shift.{name}", "must be >= 0")
            _check(syn.shift.background_swap <= 1, "data.synthetic.shift.background_swap",
                   "must be <= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Optional[dict]) -> "TrainConfig":
        return _build(cls, raw or {}, "").validate()


def _check(ok, name, message):
    if not ok:
        raise ConfigError(name, message)


def _build(cls, raw, prefix):
    if not isinstance(raw, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a mapping")
    hints = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        name = prefix + key
        if key not in hints:
            raise ConfigError(name, "unknown key")
        default = getattr(cls(), key) if _all_defaults(cls) else None
        sub = _nested_type(cls, key)
        if sub is not None and value is not None:
            kwargs[key] = _build(sub, value, name + ".")
        else:
            kwargs[key] = _coerce(name, value, default)
    return cls(**kwargs)


def _all_defaults(cls):
    return all(f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING
               for f in dataclasses.fields(cls))


_NESTED = {
    (TrainConfig, "batch_size"): BatchSizes,
    (TrainConfig, "loss"): LossWeights,
    (TrainConfig, "thresholds"): Thresholds,
    (TrainConfig, "data"): DataConfig,
    (DataConfig, "synthetic"): SyntheticConfig,
    (SyntheticConfig, "shift"): ShiftConfig,
}


def _nested_type(cls, key):
    return _NESTED.get((cls, key))


def _coerce(name, value, default):
    if default is None or value is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if not isinstance(value, (list, tuple)):
                raise ValueError(value)
            return list(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"invalid value {value!r}") from None
    return value


def parse_override(text: str):
    """Split ``key=value``; the value is parsed as YAML so numbers and lists work."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def apply_overrides(raw: dict, overrides) -> dict:
    out = copy.deepcopy(raw)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return out


def load_config_dict(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"file not found: {path}")
    text = path.read_text()
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from None
    return raw or {}


def load_config(path, overrides=()) -> TrainConfig:
    return TrainConfig.from_dict(apply_overrides(load_config_dict(path), overrides))


def config_from_any(cfg: Any) -> TrainConfig:
    if isinstance(cfg, TrainConfig):
        return cfg
    return TrainConfig.from_dict(cfg)
