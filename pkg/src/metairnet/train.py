"""Joint episodic training of the fusion network and the prototype classifier,
validation-based model selection, and the evaluation protocol."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .augment import (
    AugmentationSpec,
    cutmix_images,
    flip_augment,
    gaussian_feature_augment,
    manifold_mixup_embed,
    manual_grid_mix,
    mixup_images,
)
from .data import Episode, ImageDataset, sample_episode
from .errors import DataError, NumericalError
from .fusion import FusionNetwork, augment_support_set, choose_variants
from .protonet import (
    compute_prototypes,
    embed_batch,
    episode_nll,
    make_encoder,
    query_log_probabilities,
)

logger = logging.getLogger(__name__)

MODES = ("none", "metairnet", "flip", "gaussian", "finetunegan_raw", "mixup",
         "manifold_mixup", "cutmix", "jitter", "manual_grid")
LEARNED_MODES = ("metairnet", "jitter")  # modes whose fusion network is trained
GENERATED_MODES = ("metairnet", "finetunegan_raw", "manual_grid")
CHECKPOINT_FORMAT = "metairnet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    n: int = 5
    m: int = 1
    q: int = 16
    episodes_per_epoch: int = 100
    epochs: int = 10
    val_episodes: int = 100
    learning_rate: float = 0.001
    n_aug: int = 1
    augmentation_mode: str = "metairnet"
    flip_enabled: bool = False
    squared_distance: bool = False
    grid: int = 3
    backbone: str = "conv4"
    hidden: int = 64
    backbone_weights: str | None = None
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.augmentation_mode not in MODES:
            raise ValueError(f"unknown augmentation mode '{self.augmentation_mode}'")
        for name in ("n", "m", "q", "episodes_per_epoch", "epochs", "val_episodes", "grid"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_aug < 0:
            raise ValueError("n_aug must be non-negative")


@dataclass
class EvalReport:
    mean_accuracy: float
    ci95: float
    episode_count: int
    per_episode_accuracies: list[float] = field(repr=False, default_factory=list)

    def as_row(self) -> dict:
        return {"mean": round(self.mean_accuracy, 4), "ci95": round(self.ci95, 4), "episodes": self.episode_count}


def confidence_interval(values: Sequence[float]) -> tuple[float, float]:
    """Mean and 95% normal-approximation half-width 1.96 * s / sqrt(n), s with n-1."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        raise ValueError("confidence interval needs at least 2 values")
    return float(values.mean()), float(1.96 * values.std(ddof=1) / math.sqrt(len(values)))


def make_report(accuracies: Sequence[float]) -> EvalReport:
    mean, ci = confidence_interval(accuracies)
    return EvalReport(mean, ci, len(accuracies), [float(a) for a in accuracies])


def select_best_epoch(val_accuracies: Sequence[float]) -> int:
    """1-based epoch of the highest validation accuracy; ties go to the earliest."""
    if not len(val_accuracies):
        raise ValueError("no validation accuracies")
    return int(np.argmax(np.asarray(val_accuracies))) + 1


class MetaIRNet(nn.Module):
    """Prototype classifier C plus (optionally) the fusion network F."""

    def __init__(self, config: TrainConfig, with_fusion: bool | None = None):
        super().__init__()
        if with_fusion is None:
            with_fusion = config.augmentation_mode in LEARNED_MODES
        torch.manual_seed(config.seed)
        self.classifier = make_encoder(config.backbone, config.hidden, config.backbone_weights)
        self.fusion = None
        if with_fusion:
            torch.manual_seed(config.seed + 1)
            self.fusion = FusionNetwork(config.grid, config.backbone, config.hidden,
                                        config.image_size, config.backbone_weights)
        self.config = config


def _episode_rngs(seed: int, *key: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for episode sampling and for augmentation choices, so
    augmentation never shifts which episodes are drawn."""
    return np.random.default_rng([seed, *key, 0]), np.random.default_rng([seed, *key, 1])


def _torch_gen(rng: np.random.Generator) -> torch.Generator:
    return torch.Generator().manual_seed(int(rng.integers(0, 2 ** 62)))


def _partner(i: int, count: int, rng: np.random.Generator) -> int:
    if count == 1:
        return 0
    j = int(rng.integers(0, count - 1))
    return j + 1 if j >= i else j


def _image_extras(mode: str, s_imgs, s_lbl, s_ids, lookup, n_aug, rng, spec: AugmentationSpec):
    """Extra (images, labels) appended to the support set by image-level baselines."""
    imgs, lbls = [], []
    count = len(s_imgs)
    if mode == "finetunegan_raw":
        for i, image_id in enumerate(s_ids):
            variants = lookup[image_id]
            for v in choose_variants(len(variants), n_aug, rng):
                imgs.append(variants[int(v)].to(s_imgs.dtype))
                lbls.append(int(s_lbl[i]))
    elif mode == "manual_grid":
        for i, image_id in enumerate(s_ids):
            variants = lookup[image_id]
            for v in choose_variants(len(variants), n_aug, rng):
                imgs.append(manual_grid_mix(s_imgs[i], variants[int(v)].to(s_imgs.dtype), spec.manual_pattern))
                lbls.append(int(s_lbl[i]))
    elif mode in ("mixup", "cutmix"):
        for i in range(count):
            for _ in range(n_aug):
                j = _partner(i, count, rng)
                if mode == "mixup":
                    lam = float(rng.uniform(0.0, 1.0))
                    imgs.append(mixup_images(s_imgs[i], s_imgs[j], lam))
                    lbls.append(int(s_lbl[i] if lam >= 0.5 else s_lbl[j]))
                else:
                    imgs.append(cutmix_images(s_imgs[i], s_imgs[j], rng=rng, area=spec.cutmix_area))
                    lbls.append(int(s_lbl[i]))
    if not imgs:
        return None, None
    return torch.stack(imgs), torch.tensor(lbls)


def _feature_extras(mode, s_emb, s_lbl, n_aug, rng, spec: AugmentationSpec):
    embs, lbls = [], []
    count = len(s_emb)
    if mode == "gaussian":
        gen = _torch_gen(rng)
        for _ in range(n_aug):
            embs.append(gaussian_feature_augment(s_emb, spec.gaussian_sigma, gen))
            lbls.append(s_lbl)
    elif mode == "manifold_mixup":
        for i in range(count):
            for _ in range(n_aug):
                j = _partner(i, count, rng)
                lam = float(rng.uniform(0.0, 1.0))
                embs.append(manifold_mixup_embed(s_emb[i], s_emb[j], lam).unsqueeze(0))
                lbls.append(torch.tensor([int(s_lbl[i] if lam >= 0.5 else s_lbl[j])]))
    if not embs:
        return None, None
    return torch.cat(embs), torch.cat(lbls)


def episode_forward(
    model: MetaIRNet,
    dataset: ImageDataset,
    episode: Episode,
    lookup: Mapping[str, torch.Tensor] | None,
    n_aug: int,
    rng: np.random.Generator,
    flip: bool = False,
) -> torch.Tensor:
    """Query log-probabilities (|Q|, n) for the training path: augment support,
    embed support and queries in one batch, classify by prototypes."""
    s_imgs = dataset.images[list(episode.support)]
    s_lbl = episode.support_labels
    if model.fusion is not None and n_aug > 0:
        ids = [dataset.image_ids[i] for i in episode.support]
        aug = augment_support_set(s_imgs, s_lbl, ids, lookup, model.fusion, n_aug, rng)
        sup, lbl = aug.images, aug.labels
    else:
        sup, lbl = s_imgs, s_lbl
    if flip:
        sup = torch.cat([sup, flip_augment(s_imgs)])
        lbl = torch.cat([lbl, s_lbl])
    q_imgs = dataset.images[list(episode.query)]
    emb = model.classifier(torch.cat([sup, q_imgs]))
    protos = compute_prototypes(emb[:len(sup)], lbl, episode.n)
    return query_log_probabilities(protos, emb[len(sup):], model.config.squared_distance)


def _accuracy(log_probs: torch.Tensor, labels: torch.Tensor) -> float:
    return float((log_probs.argmax(1) == labels).float().mean()) * 100.0


@torch.no_grad()
def evaluate_model(
    model: MetaIRNet,
    dataset: ImageDataset,
    n: int,
    m: int,
    q: int,
    episodes: int,
    seed: int,
    mode: str | None = None,
    n_aug: int | None = None,
    lookup: Mapping[str, torch.Tensor] | None = None,
    flip: bool | None = None,
    spec: AugmentationSpec | None = None,
    class_pool: Sequence[int] | None = None,
    embeddings: torch.Tensor | None = None,
) -> EvalReport:
    """Accuracy over ``episodes`` test episodes, each drawn from its own stream
    derived from (seed, episode index).

    All dataset images are embedded once (inference mode); per episode only the
    added support images are embedded.
    """
    cfg = model.config
    mode = cfg.augmentation_mode if mode is None else mode
    n_aug = cfg.n_aug if n_aug is None else n_aug
    flip = cfg.flip_enabled if flip is None else flip
    spec = spec or AugmentationSpec("flip")
    if mode not in MODES:
        raise ValueError(f"unknown augmentation mode '{mode}'")
    if mode in LEARNED_MODES and model.fusion is None and n_aug > 0:
        raise ValueError(f"mode '{mode}' needs a model with a fusion network")
    if (mode in GENERATED_MODES or mode == "jitter") and n_aug > 0 and lookup is None:
        raise DataError(f"mode '{mode}' needs generated variants")
    pool = dataset.classes if class_pool is None else class_pool
    was_training = model.training
    model.eval()
    try:
        if embeddings is None:
            embeddings = embed_batch(model.classifier, dataset.images)
        accs = []
        for idx in range(episodes):
            ep_rng, aug_rng = _episode_rngs(seed, idx)
            episode = sample_episode(dataset, pool, n, m, q, ep_rng)
            s_idx = list(episode.support)
            s_emb = embeddings[s_idx]
            s_lbl = episode.support_labels
            sup_emb, sup_lbl = [s_emb], [s_lbl]
            if n_aug > 0 and mode != "none":
                s_imgs = dataset.images[s_idx]
                s_ids = [dataset.image_ids[i] for i in s_idx]
                if mode in LEARNED_MODES:
                    aug = augment_support_set(s_imgs, s_lbl, s_ids, lookup, model.fusion, n_aug, aug_rng)
                    sup_emb.append(model.classifier(aug.images[len(s_idx):]))
                    sup_lbl.append(aug.labels[len(s_idx):])
                elif mode == "flip":
                    sup_emb.append(model.classifier(flip_augment(s_imgs)))
                    sup_lbl.append(s_lbl)
                elif mode in ("gaussian", "manifold_mixup"):
                    e, l = _feature_extras(mode, s_emb, s_lbl, n_aug, aug_rng, spec)
                    sup_emb.append(e)
                    sup_lbl.append(l)
                else:
                    imgs, l = _image_extras(mode, s_imgs, s_lbl, s_ids, lookup, n_aug, aug_rng, spec)
                    sup_emb.append(model.classifier(imgs))
                    sup_lbl.append(l)
            if flip and mode != "flip":
                sup_emb.append(model.classifier(flip_augment(dataset.images[s_idx])))
                sup_lbl.append(s_lbl)
            protos = compute_prototypes(torch.cat(sup_emb), torch.cat(sup_lbl), n)
            log_probs = query_log_probabilities(protos, embeddings[list(episode.query)], cfg.squared_distance)
            accs.append(_accuracy(log_probs, episode.query_labels))
    finally:
        model.train(was_training)
    return make_report(accs)


@dataclass
class TrainResult:
    model: MetaIRNet
    best_epoch: int
    val_accuracies: list[float]
    losses: list[float]
    first_step_fusion_grad_norm: float | None = None


def preflight(mode: str, datasets: Sequence[ImageDataset], lookup: Mapping[str, torch.Tensor] | None) -> None:
    """Fail before training if a generation mode lacks cached variants."""
    if mode not in GENERATED_MODES and mode != "jitter":
        return
    if lookup is None:
        raise DataError(f"mode '{mode}' needs generated variants but no cache was given")
    missing = [i for ds in datasets for i in ds.image_ids if i not in lookup]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise DataError(f"generated-image cache misses {len(missing)} image(s): {shown}")


def run_meta_training(
    config: TrainConfig,
    base: ImageDataset,
    val: ImageDataset,
    lookup: Mapping[str, torch.Tensor] | None = None,
    val_q: int | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Train F and C jointly with Adam on base-class episodes; after every epoch
    measure validation accuracy and keep the best epoch's weights."""
    mode = config.augmentation_mode
    preflight(mode, [base, val], lookup)
    model = MetaIRNet(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    learned = mode in LEARNED_MODES
    n_aug = config.n_aug if learned else 0
    best_state, best_acc, best_epoch = None, -math.inf, 0
    val_accs, losses = [], []
    first_grad = None
    for epoch in range(1, config.epochs + 1):
        model.train()
        epoch_loss = 0.0
        for i in range(config.episodes_per_epoch):
            ep_rng, aug_rng = _episode_rngs(config.seed, epoch, i)
            episode = sample_episode(base, base.classes, config.n, config.m, config.q, ep_rng)
            log_probs = episode_forward(model, base, episode, lookup, n_aug, aug_rng, config.flip_enabled)
            loss = episode_nll(log_probs, episode.query_labels)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, episode {i}")
            opt.zero_grad()
            loss.backward()
            if first_grad is None and model.fusion is not None:
                first_grad = float(torch.sqrt(sum((p.grad ** 2).sum() for p in model.fusion.parameters()
                                                  if p.grad is not None)))
            opt.step()
            epoch_loss += loss.item()
        epoch_loss /= config.episodes_per_epoch
        report = evaluate_model(model, val, config.n, config.m, val_q or config.q, config.val_episodes,
                                seed=config.seed + 7919, mode=mode if learned else "none",
                                n_aug=n_aug, lookup=lookup)
        val_accs.append(report.mean_accuracy)
        losses.append(epoch_loss)
        logger.info("epoch %d loss %.4f val %.2f", epoch, epoch_loss, report.mean_accuracy)
        if on_epoch:
            on_epoch(epoch, epoch_loss, report.mean_accuracy)
        if report.mean_accuracy > best_acc:
            best_acc, best_epoch = report.mean_accuracy, epoch
            best_state = copy.deepcopy(model.state_dict())
    assert best_epoch == select_best_epoch(val_accs)
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, best_epoch, val_accs, losses, first_grad)


def run_naug_sweep(
    model: MetaIRNet,
    dataset: ImageDataset,
    values: Sequence[int],
    n: int,
    m: int,
    q: int,
    episodes: int,
    seed: int,
    lookup: Mapping[str, torch.Tensor] | None = None,
    mode: str | None = None,
) -> list[tuple[int, EvalReport]]:
    """One report per n_aug value, all on the same episodes."""
    mode = mode or model.config.augmentation_mode
    emb = None
    out = []
    for v in values:
        if emb is None:
            model.eval()
            with torch.no_grad():
                emb = embed_batch(model.classifier, dataset.images)
        out.append((v, evaluate_model(model, dataset, n, m, q, episodes, seed, mode=mode, n_aug=v,
                                      lookup=lookup, embeddings=emb)))
    return out


def save_checkpoint(path: str | Path, model: MetaIRNet, config_hash: str, val_accuracy: float,
                    epoch: int, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "val_accuracy": val_accuracy,
        "epoch": epoch,
        "train_config": asdict(model.config),
        "classifier": model.classifier.state_dict(),
        "fusion": model.fusion.state_dict() if model.fusion is not None else None,
        **(extra or {}),
    }, path)


def load_checkpoint(path: str | Path) -> tuple[MetaIRNet, dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a model checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {blob.get('version')}")
    cfg = TrainConfig(**{**blob["train_config"], "backbone_weights": None})
    model = MetaIRNet(cfg, with_fusion=blob["fusion"] is not None)
    model.classifier.load_state_dict(blob["classifier"])
    if blob["fusion"] is not None:
        model.fusion.load_state_dict(blob["fusion"])
    model.eval()
    return model, blob
