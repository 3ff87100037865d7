"""Non-meta classifiers over frozen features, fit per episode."""

from __future__ import annotations

import warnings
from typing import Mapping, Sequence

import numpy as np
import torch
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.multiclass import OneVsRestClassifier

from .augment import manual_grid_mix
from .data import ImageDataset, sample_episode
from .fusion import choose_variants
from .protonet import embed_batch
from .train import EvalReport, _episode_rngs, make_report

PROBES = ("nearest_neighbor", "logistic_regression", "softmax_regression")
EXTRAS = ("original", "generated", "mixed")


def nearest_neighbor_predict(support: np.ndarray, labels: np.ndarray, queries: np.ndarray) -> np.ndarray:
    d = ((queries[:, None, :] - support[None, :, :]) ** 2).sum(-1)
    return labels[d.argmin(1)]


def _fit_predict(kind: str, support, labels, queries) -> np.ndarray:
    if kind == "nearest_neighbor":
        return nearest_neighbor_predict(support, labels, queries)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        if kind == "logistic_regression":
            clf = OneVsRestClassifier(LogisticRegression(max_iter=1000))
        else:
            clf = LogisticRegression(max_iter=1000)
        clf.fit(support, labels)
    return clf.predict(queries)


@torch.no_grad()
def evaluate_frozen_probes(
    encoder: torch.nn.Module,
    dataset: ImageDataset,
    n: int = 5,
    m: int = 1,
    q: int = 16,
    episodes: int = 2000,
    seed: int = 0,
    training_data: str = "original",
    lookup: Mapping[str, torch.Tensor] | None = None,
    pattern: Sequence[Sequence[int]] = ((1, 0, 1), (0, 1, 0), (1, 0, 1)),
    probes: Sequence[str] = PROBES,
) -> dict[str, EvalReport]:
    """Per-episode nearest neighbour, one-vs-all logistic and softmax regression on
    frozen features. ``training_data`` adds one generated variant ("generated") or
    one fixed-pattern mix of original and variant ("mixed") per support image."""
    if training_data not in EXTRAS:
        raise ValueError(f"training_data must be one of {EXTRAS}")
    if training_data != "original" and lookup is None:
        raise ValueError(f"'{training_data}' probes need generated variants")
    encoder.eval()
    feats = embed_batch(encoder, dataset.images)
    accs = {p: [] for p in probes}
    for idx in range(episodes):
        ep_rng, aug_rng = _episode_rngs(seed, idx)
        ep = sample_episode(dataset, dataset.classes, n, m, q, ep_rng)
        s_idx = list(ep.support)
        sup = [feats[s_idx]]
        lbl = [ep.support_labels]
        if training_data != "original":
            extra = []
            for i in s_idx:
                variants = lookup[dataset.image_ids[i]]
                v = variants[int(choose_variants(len(variants), 1, aug_rng)[0])]
                extra.append(v if training_data == "generated" else manual_grid_mix(dataset.images[i], v, pattern))
            sup.append(embed_batch(encoder, torch.stack(extra)))
            lbl.append(ep.support_labels)
        X = torch.cat(sup).double().numpy()
        y = torch.cat(lbl).numpy()
        Xq = feats[list(ep.query)].double().numpy()
        yq = ep.query_labels.numpy()
        for p in probes:
            accs[p].append(float((_fit_predict(p, X, y, Xq) == yq).mean()) * 100.0)
    return {p: make_report(a) for p, a in accs.items()}
