"""Glue between an ExperimentConfig and the library: dataset loading, splits,
generator and cache handles, and the results ledger."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from datetime import datetime, timezone
from functools import cached_property
from pathlib import Path

from .augment import AugmentationSpec
from .cache import GeneratedImageCache, VariantLookup, jitter_lookup
from .config import ExperimentConfig
from .data import ClassSplit, ImageDataset, build_class_splits, load_image_directory, load_manifest
from .errors import DataError
from .generator import ConvFeatureExtractor, VGGFeatureExtractor, load_generator

LEDGER_FIELDS = ["timestamp", "command", "config_hash", "mode", "n", "m", "q", "episodes", "mean", "ci95"]


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


@dataclass
class Experiment:
    config: ExperimentConfig

    @property
    def output_dir(self) -> Path:
        return Path(self.config.output_dir)

    @property
    def ledger_path(self) -> Path:
        return self.output_dir / "results.csv"

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / f"model_{self.config.train.augmentation_mode}.pt"

    @cached_property
    def dataset(self) -> ImageDataset:
        ds_cfg = self.config.dataset
        size = (ds_cfg.image_size, ds_cfg.image_size)
        path = Path(ds_cfg.path)
        if path.is_file():
            return load_manifest(path, size, tuple(ds_cfg.value_range))
        return load_image_directory(path, size, tuple(ds_cfg.value_range))

    @cached_property
    def split(self) -> ClassSplit:
        return build_class_splits(self.dataset.classes, self.config.split.as_spec())

    def part(self, name: str) -> ImageDataset:
        classes = {"base": self.split.base_classes, "val": self.split.val_classes,
                   "novel": self.split.novel_classes}[name]
        return self.dataset.subset(classes)

    @cached_property
    def feature_extractor(self):
        g = self.config.generator
        if g.perceptual == "vgg16":
            return VGGFeatureExtractor(g.perceptual_weights)
        return ConvFeatureExtractor(seed=0)

    def generator(self):
        return load_generator(self.config.generator.checkpoint)

    @cached_property
    def cache(self) -> GeneratedImageCache:
        ckpt = Path(self.config.generator.checkpoint)
        gen_id = file_digest(ckpt) if ckpt.is_file() else str(ckpt)
        return GeneratedImageCache(self.config.resolved_cache_dir, self.config.adapt, gen_id)

    def lookup(self, datasets: list[ImageDataset], mode: str) -> VariantLookup | None:
        """Variants needed by ``mode`` for the given datasets (None if the mode needs none)."""
        if mode == "jitter":
            parts = [jitter_lookup(ds, self.config.adapt.num_variants, self.config.eval.jitter_magnitude,
                                   self.config.seed) for ds in datasets]
        elif mode in ("metairnet", "finetunegan_raw", "manual_grid"):
            parts = [self.cache.lookup(ds) for ds in datasets]
        else:
            return None
        merged = VariantLookup({}, tuple(self.config.dataset.value_range))
        for part in parts:
            merged = merged.merged(part)
        return merged

    def augmentation_spec(self) -> AugmentationSpec:
        e = self.config.eval
        return AugmentationSpec("flip", gaussian_sigma=e.gaussian_sigma, cutmix_area=tuple(e.cutmix_area),
                                jitter_magnitude=e.jitter_magnitude, manual_pattern=e.manual_pattern)

    def append_ledger(self, command: str, mode: str, n: int, m: int, q: int, report) -> dict:
        row = {
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "command": command,
            "config_hash": self.config.hash(),
            "mode": mode,
            "n": n, "m": m, "q": q,
            "episodes": report.episode_count,
            "mean": f"{report.mean_accuracy:.4f}",
            "ci95": f"{report.ci95:.4f}",
        }
        append_ledger_row(self.ledger_path, row)
        return row


def append_ledger_row(path: str | Path, row: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LEDGER_FIELDS)
        if new:
            w.writeheader()
        w.writerow(row)


def read_ledger(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_image_set(path: str | Path, name: str, size: int, value_range) -> ImageDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"image set '{name}' not found at {path}")
    if path.is_file():
        return load_manifest(path, (size, size), tuple(value_range))
    return load_image_directory(path, (size, size), tuple(value_range))
