"""Prototype classifier: embedding network, class prototypes, distance softmax."""

from __future__ import annotations

import logging
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def conv_block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(),
        nn.MaxPool2d(2),
    )


class Conv4(nn.Module):
    def __init__(self, in_channels: int = 3, hidden: int = 64, out_channels: int | None = None):
        super().__init__()
        out_channels = out_channels or hidden
        self.encoder = nn.Sequential(
            conv_block(in_channels, hidden),
            conv_block(hidden, hidden),
            conv_block(hidden, hidden),
            conv_block(hidden, out_channels),
        )

    def forward(self, x):
        return self.encoder(x).flatten(1)


class ResNet18Encoder(nn.Module):
    """torchvision ResNet-18 trunk (global-pooled 512-d features), optionally
    initialised from a local weights file."""

    def __init__(self, weights_path: str | Path | None = None):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18()
        if weights_path is not None:
            path = Path(weights_path)
            if not path.is_file():
                raise DataError(f"backbone weights not found: {path}")
            net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        net.fc = nn.Identity()
        self.net = net

    def forward(self, x):
        return self.net(x)


def make_encoder(name: str = "conv4", hidden: int = 64, weights: str | None = None) -> nn.Module:
    if name == "conv4":
        enc = Conv4(hidden=hidden)
        if weights:
            enc.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
        return enc
    if name == "resnet18":
        return ResNet18Encoder(weights)
    raise ValueError(f"unknown backbone '{name}'")


def embed_batch(net: nn.Module, images: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    """Embed (B, 3, H, W) images to (B, feature_dim). Respects ``net.training``."""
    if images.ndim != 4:
        raise ValueError(f"expected a (B, 3, H, W) batch, got {tuple(images.shape)}")
    if len(images) <= chunk:
        return net(images)
    return torch.cat([net(images[i:i + chunk]) for i in range(0, len(images), chunk)])


def compute_prototypes(embeddings: torch.Tensor, labels: torch.Tensor, n: int) -> torch.Tensor:
    """(n, D) matrix whose row c is the mean of the class-c embeddings."""
    labels = torch.as_tensor(labels, device=embeddings.device)
    counts = torch.bincount(labels, minlength=n)
    if len(counts) > n or bool((counts[:n] == 0).any()):
        empty = [c for c in range(n) if c >= len(counts) or counts[c] == 0]
        raise DataError(f"no support embeddings for classes {empty}" if empty else "label out of range")
    sums = torch.zeros(n, embeddings.shape[1], dtype=embeddings.dtype, device=embeddings.device)
    sums = sums.index_add(0, labels, embeddings)
    return sums / counts.to(embeddings.dtype).unsqueeze(1)


def prototype_distances(prototypes: torch.Tensor, queries: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """(Q, n) Euclidean (or squared Euclidean) distances."""
    diff = queries.unsqueeze(1) - prototypes.unsqueeze(0)
    sq = (diff ** 2).sum(-1)
    return sq if squared else sq.sqrt()


def query_log_probabilities(prototypes: torch.Tensor, queries: torch.Tensor, squared: bool = False) -> torch.Tensor:
    single = queries.ndim == 1
    if single:
        queries = queries.unsqueeze(0)
    out = F.log_softmax(-prototype_distances(prototypes, queries, squared), dim=-1)
    return out[0] if single else out


def query_class_probabilities(prototypes: torch.Tensor, queries: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """softmax over classes of -||C(I) - p_k|| (or the squared distance)."""
    return query_log_probabilities(prototypes, queries, squared).exp()


def episode_cross_entropy(probabilities: torch.Tensor, query_labels: torch.Tensor) -> torch.Tensor:
    """Mean over queries of -log P(true class), with probabilities floored at 1e-12."""
    probabilities = torch.atleast_2d(probabilities)
    labels = torch.as_tensor(query_labels, device=probabilities.device).reshape(-1)
    picked = probabilities.gather(1, labels.unsqueeze(1)).squeeze(1)
    if bool((picked < PROB_FLOOR).any()):
        logger.warning("probability floor hit for %d queries", int((picked < PROB_FLOOR).sum()))
    return -picked.clamp_min(PROB_FLOOR).log().mean()


def episode_nll(log_probabilities: torch.Tensor, query_labels: torch.Tensor) -> torch.Tensor:
    """Same loss as :func:`episode_cross_entropy`, computed from log-probabilities
    (used in training to avoid the floor clipping gradients)."""
    return F.nll_loss(log_probabilities, torch.as_tensor(query_labels, device=log_probabilities.device))
