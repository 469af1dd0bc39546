"""Experiment configuration: one JSON document holding every module's settings.

Precedence is command-line flag > config file > built-in default. Unknown keys
are rejected at every nesting level.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .correction import CorrectionConfig
from .correlation import DistanceMetricConfig
from .errors import ConfigError
from .losses import LossConfig
from .trainer import TrainConfig


@dataclass
class WorldConfig:
    classes: int = 20
    dim_in: int = 16
    dim_emb: int | None = None
    min_samples: int = 3
    max_samples: int = 8
    corr_knob: float = 1.0
    heldout_classes: int = 0
    spread: float = 0.02
    input_noise: float = 0.01
    anisotropy: float = 0.0
    rotate_variance: bool = False


@dataclass
class EvalConfig:
    ks: list = field(default_factory=lambda: [1, 2, 4, 8])


# TrainConfig fields that live in their own top-level sections
_TRAIN_NESTED = ("correction", "augment", "loss")


@dataclass
class ExperimentConfig:
    seed: int | None = None
    threads: int = 1
    stats_mode: str = "diagonal"
    world: WorldConfig = field(default_factory=WorldConfig)
    metric: DistanceMetricConfig = field(default_factory=DistanceMetricConfig)
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: dict = field(default_factory=dict)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolved_seed(self) -> int:
        if self.seed is not None:
            return int(self.seed)
        env = os.environ.get("IAA_SEED")
        if env:
            try:
                return int(env)
            except ValueError:
                raise ConfigError(f"IAA_SEED must be an integer, got {env!r}") from None
        return 0

    def train_config(self, augment: bool = True) -> TrainConfig:
        seed = self.resolved_seed()
        aug = dataclasses.replace(self.augment, seed=seed) if augment else None
        try:
            return TrainConfig(
                **{**self.train, "seed": seed, "stats_mode": self.train.get("stats_mode", self.stats_mode)},
                correction=self.correction,
                augment=aug,
                loss=self.loss,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seed"] = self.resolved_seed()
        d["augment"]["seed"] = d["seed"]
        d["correction"] = self.correction.to_dict()
        d["train"] = {k: v for k, v in _train_defaults().items()}
        d["train"].update(self.train)
        return d


def _train_defaults() -> dict:
    out = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name in _TRAIN_NESTED or f.name == "seed":
            continue
        value = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    data = dict(data)
    if cls is CorrectionConfig and "metric" in data:
        data["metric"] = _build(DistanceMetricConfig, data["metric"], f"{where}.metric")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


_SECTIONS = {
    "world": WorldConfig,
    "metric": DistanceMetricConfig,
    "correction": CorrectionConfig,
    "augment": AugmentConfig,
    "loss": LossConfig,
    "eval": EvalConfig,
}


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        elif key == "train":
            if not isinstance(value, dict):
                raise ConfigError("train: expected an object")
            allowed = set(_train_defaults())
            bad = sorted(set(value) - allowed)
            if bad:
                raise ConfigError(f"train: unknown keys {bad}")
            kwargs[key] = dict(value)
        else:
            kwargs[key] = value
    cfg = ExperimentConfig(**kwargs)
    if cfg.stats_mode not in ("diagonal", "full"):
        raise ConfigError(f"stats_mode must be 'diagonal' or 'full', got {cfg.stats_mode!r}")
    if not isinstance(cfg.threads, int) or cfg.threads < 1:
        raise ConfigError("threads must be a positive integer")
    return cfg


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(doc)


def override(cfg: ExperimentConfig, section: str, **values) -> ExperimentConfig:
    """Apply flag values that are not None to one section."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    if section == "train":
        merged = {**cfg.train, **values}
        return dataclasses.replace(cfg, train=merged)
    if section == "root":
        return dataclasses.replace(cfg, **values)
    current = getattr(cfg, section)
    try:
        return dataclasses.replace(cfg, **{section: dataclasses.replace(current, **values)})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def parse_sigma(text: str) -> float:
    if text.lower() in ("inf", "infinity"):
        return math.inf
    return float(text)
