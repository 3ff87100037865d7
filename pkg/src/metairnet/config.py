"""Experiment configuration: a YAML key tree mapped onto dataclasses.

Unknown keys are rejected. Path fields expand ``$VARS`` and can be overridden with
METAIRNET_DATASET_PATH, METAIRNET_OUTPUT_DIR, METAIRNET_CACHE_DIR and
METAIRNET_GENERATOR_CHECKPOINT.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .adapt import AdaptConfig
from .errors import ConfigError
from .train import MODES, TrainConfig

ENV_OVERRIDES = {
    "METAIRNET_DATASET_PATH": ("dataset", "path"),
    "METAIRNET_OUTPUT_DIR": (None, "output_dir"),
    "METAIRNET_CACHE_DIR": (None, "cache_dir"),
    "METAIRNET_GENERATOR_CHECKPOINT": ("generator", "checkpoint"),
}


@dataclass
class DatasetConfig:
    path: str = "data"
    image_size: int = 64
    value_range: list[float] = field(default_factory=lambda: [-1.0, 1.0])


@dataclass
class SplitConfig:
    ratios: list[float] | None = field(default_factory=lambda: [0.5, 0.25, 0.25])
    seed: int = 0
    classes: dict[str, list[int]] | None = None

    def as_spec(self) -> dict:
        if self.classes is not None:
            return {"classes": self.classes}
        return {"ratios": self.ratios, "seed": self.seed}


@dataclass
class GeneratorConfig:
    checkpoint: str = "generator.pt"
    latent_dim: int = 32
    embed_dim: int = 16
    width: float = 0.25
    pretrain_epochs: int = 40
    perceptual: str = "random_conv"  # or "vgg16"
    perceptual_weights: str | None = None
    batch_size: int = 32


@dataclass
class EvalConfig:
    episodes: int = 1000
    q: int = 16
    probe_episodes: int = 2000
    n_aug_values: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    gaussian_sigma: float = 0.01
    cutmix_area: list[float] = field(default_factory=lambda: [0.1, 0.5])
    jitter_magnitude: float = 0.1
    manual_pattern: list[list[int]] = field(default_factory=lambda: [[1, 0, 1], [0, 1, 0], [1, 0, 1]])


@dataclass
class AnalysisConfig:
    eigenvalues: int = 50
    max_images: int | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    cache_dir: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    @property
    def resolved_cache_dir(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else Path(self.output_dir) / "cache"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed, image_size=self.dataset.image_size)


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value or {}, f"{where}.{key}" if where else key)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data or {}, "")
    _apply_env(cfg)
    _validate(cfg)
    return cfg


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return config_from_dict(data)


def _apply_env(cfg: ExperimentConfig) -> None:
    for var, (section, key) in ENV_OVERRIDES.items():
        target = cfg if section is None else getattr(cfg, section)
        if os.environ.get(var):
            setattr(target, key, os.environ[var])
    for target, key in ((cfg, "output_dir"), (cfg, "cache_dir"), (cfg.dataset, "path"),
                        (cfg.generator, "checkpoint"), (cfg.generator, "perceptual_weights"),
                        (cfg.train, "backbone_weights")):
        value = getattr(target, key)
        if value:
            setattr(target, key, os.path.expanduser(os.path.expandvars(str(value))))


def _validate(cfg: ExperimentConfig) -> None:
    lo, hi = cfg.dataset.value_range
    if not lo < hi:
        raise ConfigError("dataset.value_range must be increasing")
    if cfg.split.classes is None and cfg.split.ratios is None:
        raise ConfigError("split needs 'ratios' or 'classes'")
    if cfg.train.augmentation_mode not in MODES:
        raise ConfigError(f"unknown augmentation mode {cfg.train.augmentation_mode}")
    if cfg.generator.perceptual not in ("random_conv", "vgg16"):
        raise ConfigError("generator.perceptual must be 'random_conv' or 'vgg16'")
    if max(cfg.eval.n_aug_values, default=0) > cfg.adapt.num_variants:
        raise ConfigError("eval.n_aug_values exceeds adapt.num_variants")


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
