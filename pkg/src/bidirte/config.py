"""Run configuration: nested dataclasses addressed by flat dotted keys.

A config file is YAML holding flat keys, e.g.::

    seed: 7
    train.batch_size: 8
    tau: 0.1
    contrastive.enabled: false
    direction.o2s: false

Command-line ``--set key=value`` overrides are applied on top.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .contrastive import ContrastiveConfig
from .decode import DecodeConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-5
    warmup_fraction: float = 0.25
    dropout: float = 0.1
    max_epochs: int = 100
    patience: int = 10
    eval_every: int = 1
    target_f1: float | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0 or self.max_epochs < 1 or self.patience < 1 or self.eval_every < 1:
            raise ValueError("batch_size, lr, max_epochs, patience and eval_every must be positive")
        if not 0 <= self.warmup_fraction <= 1 or not 0 <= self.dropout < 1:
            raise ValueError("warmup_fraction must lie in [0, 1] and dropout in [0, 1)")


@dataclass
class EncoderConfig:
    backend: str = "tiny"
    name: str = "bert-base-cased"
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4

    def __post_init__(self):
        if self.backend not in ("tiny", "pretrained"):
            raise ValueError(f"unknown encoder backend {self.backend!r}")


@dataclass
class RunConfig:
    seed: int = 42
    max_len: int = 100
    tokenizer: str = "regex"
    match_standard: str = "exact"
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def to_flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    out[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
            else:
                out[f.name] = value
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        values = cls().to_flat()
        for key, value in flat.items():
            key = ALIASES.get(key, key)
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(values[key], value, key)
        top, nested = {}, {}
        for key, value in values.items():
            if "." in key:
                group, name = key.split(".", 1)
                nested.setdefault(group, {})[name] = value
            else:
                top[key] = value
        types = {f.name: f.default_factory for f in dataclasses.fields(cls) if f.default_factory is not dataclasses.MISSING}
        try:
            for group, kwargs in nested.items():
                top[group] = types[group](**kwargs)
            cfg = cls(**top)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        if cfg.match_standard not in ("partial", "exact"):
            raise ConfigError(f"match_standard must be 'partial' or 'exact', got {cfg.match_standard!r}")
        return cfg

    def replace(self, **flat) -> "RunConfig":
        values = self.to_flat()
        values.update({ALIASES.get(k, k): v for k, v in flat.items()})
        return RunConfig.from_flat(values)


ALIASES = {
    "tau": "contrastive.tau",
    "beta": "contrastive.beta",
    "omega1": "contrastive.omega1",
    "omega2": "contrastive.omega2",
    "direction.s2o": "model.s2o",
    "direction.o2s": "model.o2s",
    "relation_prediction.enabled": "model.relation_prediction",
    "teacher_forcing": "model.teacher_forcing",
}


def _coerce(default, value, key):
    if isinstance(value, str) and not isinstance(default, str):
        value = yaml.safe_load(value)
        if isinstance(value, str) and (isinstance(default, float) or default is None):
            try:
                value = float(value)  # PyYAML reads "1e-3" as a string
            except ValueError:
                pass
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float) or default is None and key == "train.target_f1":
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        return str(value)
    return value


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    flat = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping of dotted keys")
        flat.update(_flatten(data))
    flat.update(overrides or {})
    return RunConfig.from_flat(flat)


def _flatten(data: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


# Desk-scale settings for the tiny encoder on the synthetic corpus. The low
# contrastive weights keep Lc from dominating the tagging loss on 30 sentences.
TOY_OVERRIDES = {
    "train.lr": 1e-3,
    "train.batch_size": 4,
    "train.max_epochs": 300,
    "train.patience": 300,
    "train.warmup_fraction": 0.05,
    "train.target_f1": 1.0,
    "contrastive.omega1": 0.1,
    "contrastive.omega2": 0.1,
}


def toy_config(**overrides) -> RunConfig:
    return RunConfig().replace(**{**TOY_OVERRIDES, **overrides})
