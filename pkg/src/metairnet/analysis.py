"""Diversity of image sets: pairwise-distance distributions (overall and split by
class agreement) and PCA eigenvalue spectra of embedded features."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

HIST_BINS = 50


@dataclass
class DistanceStats:
    mean: float
    stddev: float
    bin_edges: np.ndarray
    counts: np.ndarray
    pair_count: int
    distances: np.ndarray

    @property
    def histogram(self) -> tuple[np.ndarray, np.ndarray]:
        return self.bin_edges, self.counts


def _as_features(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be a 2-D array, got shape {x.shape}")
    return x


def pairwise_distances(features) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All i < j Euclidean distances, row-major pair order, with their (i, j) indices."""
    x = _as_features(features)
    n = len(x)
    out, ii, jj = [], [], []
    for i in range(n - 1):
        diff = x[i + 1:] - x[i]
        out.append(np.sqrt((diff * diff).sum(axis=1)))
        ii.append(np.full(n - i - 1, i))
        jj.append(np.arange(i + 1, n))
    if not out:
        return np.empty(0), np.empty(0, dtype=int), np.empty(0, dtype=int)
    return np.concatenate(out), np.concatenate(ii), np.concatenate(jj)


def distance_stats(distances: np.ndarray, bins: int = HIST_BINS, max_distance: float | None = None) -> DistanceStats:
    if len(distances) == 0:
        raise ValueError("no pairs")
    top = float(distances.max()) if max_distance is None else max_distance
    counts, edges = np.histogram(distances, bins=bins, range=(0.0, top if top > 0 else 1.0))
    return DistanceStats(float(distances.mean()), float(distances.std()), edges, counts, len(distances), distances)


def pairwise_distance_stats(features, bins: int = HIST_BINS) -> DistanceStats:
    """Mean / population stddev / histogram (bins over [0, max]) of all pairwise distances."""
    x = _as_features(features)
    if len(x) < 2:
        raise ValueError("need at least 2 feature vectors")
    d, _, _ = pairwise_distances(x)
    return distance_stats(d, bins)


def class_conditional_distance_stats(features, labels, bins: int = HIST_BINS) -> tuple[DistanceStats, DistanceStats]:
    """(intra, inter): stats over same-label pairs and different-label pairs."""
    x = _as_features(features)
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise ValueError("labels and features differ in length")
    d, ii, jj = pairwise_distances(x)
    same = labels[ii] == labels[jj]
    if not same.any():
        raise ValueError("intra-class split is empty: no class has two members")
    if same.all():
        raise ValueError("inter-class split is empty: all items share one class")
    return distance_stats(d[same], bins), distance_stats(d[~same], bins)


def pca_eigenspectrum(features, k: int | None = None) -> np.ndarray:
    """Top-k eigenvalues (descending, clamped at 0) of the (N-1)-normalised
    covariance. Uses the N x N Gram matrix when the dimension exceeds N."""
    x = _as_features(features)
    n, d = x.shape
    if n < 2:
        raise ValueError("need at least 2 feature vectors")
    if k is None:
        k = d
    if k > d:
        logger.warning("requested %d eigenvalues of a %d-dimensional covariance; truncating", k, d)
        k = d
    xc = x - x.mean(axis=0)
    if d <= n:
        mat = xc.T @ xc / (n - 1)
    else:
        mat = xc @ xc.T / (n - 1)
    vals = np.linalg.eigvalsh(mat)[::-1]
    vals = np.where(vals < 0, 0.0, vals)  # rounding noise only
    if len(vals) < k:
        vals = np.concatenate([vals, np.zeros(k - len(vals))])
    return vals[:k]


@dataclass
class SetSummary:
    name: str
    overall: DistanceStats
    spectrum: np.ndarray
    intra: DistanceStats | None = None
    inter: DistanceStats | None = None


def compare_sets(
    sets: dict[str, np.ndarray],
    embedder: Callable[[np.ndarray], np.ndarray] | None = None,
    labels: Sequence | None = None,
    k: int = 50,
    out_dir: str | Path | None = None,
) -> dict[str, SetSummary]:
    """Distance and spectrum summaries for named sets (typically "original",
    "generated", "fused"). ``embedder`` maps a set to features; without it the
    inputs are taken to be features already. With ``out_dir`` the histograms,
    eigenvalue plot and a CSV summary are written there."""
    report = {}
    for name, items in sets.items():
        feats = _as_features(embedder(items) if embedder is not None else items)
        summary = SetSummary(name, pairwise_distance_stats(feats), pca_eigenspectrum(feats, min(k, feats.shape[1])))
        if labels is not None:
            summary.intra, summary.inter = class_conditional_distance_stats(feats, labels)
        report[name] = summary
    if out_dir is not None:
        write_artifacts(report, out_dir)
    return report


def write_artifacts(report: dict[str, SetSummary], out_dir: str | Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def hist(stats: DistanceStats, title: str, path: Path):
        fig, ax = plt.subplots(figsize=(4, 3))
        edges, counts = stats.histogram
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge")
        ax.set_title(f"{title}\nmean {stats.mean:.2f}  std {stats.stddev:.2f}")
        ax.set_xlabel("pairwise distance")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    rows = []
    for name, s in report.items():
        hist(s.overall, name, out / f"hist_{name}.png")
        rows.append([name, "all", s.overall.pair_count, s.overall.mean, s.overall.stddev])
        for split in ("intra", "inter"):
            stats = getattr(s, split)
            if stats is not None:
                hist(stats, f"{name} ({split}-class)", out / f"hist_{name}_{split}.png")
                rows.append([name, split, stats.pair_count, stats.mean, stats.stddev])
    fig, ax = plt.subplots(figsize=(4, 3))
    for name, s in report.items():
        ax.plot(np.arange(1, len(s.spectrum) + 1), s.spectrum, label=name)
    ax.set_xlabel("component")
    ax.set_ylabel("eigenvalue")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "eigenvalues.png")
    plt.close(fig)
    written.append(out / "eigenvalues.png")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["set", "split", "pairs", "mean", "stddev"])
        w.writerows(rows)
        for name, s in report.items():
            w.writerow([name, "eigenvalues", len(s.spectrum), *[f"{v:.6g}" for v in s.spectrum]])
    written.append(out / "summary.csv")
    return written


def embedder_for(model, batch: int = 256) -> Callable:
    """Frozen-encoder embedder (the model's classifier) mapping image tensors to numpy features."""
    import torch

    def embed(images):
        model.eval()
        with torch.no_grad():
            feats = [model.classifier(images[i:i + batch]) for i in range(0, len(images), batch)]
        return torch.cat(feats).double().numpy()

    return embed


def build_diversity_sets(model, dataset, lookup, seed: int = 0, max_images: int | None = None):
    """Original images, one uniformly chosen cached variant per original, and the
    fusion of each pair by ``model.fusion``; returns (sets, labels)."""
    import torch

    from .fusion import expand_weight_grid, fuse_images, predict_weight_grid

    if model.fusion is None:
        raise ValueError("building the fused set needs a model with a fusion network")
    rng = np.random.default_rng(seed)
    idx = np.arange(len(dataset))
    if max_images is not None and max_images < len(idx):
        idx = np.sort(rng.choice(len(idx), size=max_images, replace=False))
    originals = dataset.images[idx]
    generated = []
    for i in idx:
        variants = lookup[dataset.image_ids[i]]
        generated.append(variants[int(rng.integers(len(variants)))])
    generated = torch.stack(generated).to(originals.dtype)
    model.eval()
    with torch.no_grad():
        w = predict_weight_grid(model.fusion, originals, generated)
        fused = fuse_images(originals, generated, expand_weight_grid(w, *originals.shape[-2:]))
    return {"original": originals, "generated": generated, "fused": fused}, dataset.labels[idx]
