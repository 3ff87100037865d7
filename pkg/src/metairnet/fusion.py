"""Image fusion network: block-weighted mixing of a real image and a generated
counterpart, and the augmented support set built from it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import DataError
from .protonet import make_encoder


class FusionNetwork(nn.Module):
    """Two unshared encoders (real, generated) -> concatenated features -> FC -> g*g logits."""

    def __init__(self, grid: int = 3, backbone: str = "conv4", hidden: int = 64,
                 image_size: int = 64, weights: str | None = None):
        super().__init__()
        self.grid = grid
        self.encoder_real = make_encoder(backbone, hidden, weights)
        self.encoder_generated = make_encoder(backbone, hidden, weights)
        with torch.no_grad():
            probe = torch.zeros(2, 3, image_size, image_size)
            was = self.encoder_real.training
            self.encoder_real.eval()
            feat_dim = self.encoder_real(probe).shape[1]
            self.encoder_real.train(was)
        self.head = nn.Linear(2 * feat_dim, grid * grid)

    def logits(self, original: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
        f = torch.cat([self.encoder_real(original), self.encoder_generated(generated)], dim=1)
        return self.head(f).view(-1, self.grid, self.grid)

    def forward(self, original: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(original, generated))


def predict_weight_grid(net: FusionNetwork, original: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
    """(B, g, g) block weights in (0, 1) for batches of image pairs."""
    if original.shape != generated.shape:
        raise ValueError(f"size mismatch: {tuple(original.shape)} vs {tuple(generated.shape)}")
    single = original.ndim == 3
    if single:
        original, generated = original.unsqueeze(0), generated.unsqueeze(0)
    w = net(original, generated)
    return w[0] if single else w


def block_index(size: int, g: int) -> torch.Tensor:
    """Cell index of every pixel along one axis: cell i covers [floor(i*size/g), floor((i+1)*size/g))."""
    if size < g:
        raise ValueError(f"cannot split {size} pixels into {g} cells")
    bounds = [(i * size) // g for i in range(g + 1)]
    idx = torch.empty(size, dtype=torch.long)
    for i in range(g):
        idx[bounds[i]:bounds[i + 1]] = i
    return idx


def expand_weight_grid(w: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Block-constant (…, height, width) map from a (…, g, g) grid."""
    g = w.shape[-1]
    if w.shape[-2] != g:
        raise ValueError(f"weight grid must be square, got {tuple(w.shape[-2:])}")
    rows, cols = block_index(height, g), block_index(width, g)
    return w.index_select(-2, rows.to(w.device)).index_select(-1, cols.to(w.device))


def fuse_images(original: torch.Tensor, generated: torch.Tensor, weight_map: torch.Tensor) -> torch.Tensor:
    """w * original + (1 - w) * generated, with the (…, H, W) map broadcast over channels."""
    if original.shape != generated.shape:
        raise ValueError(f"shape mismatch: {tuple(original.shape)} vs {tuple(generated.shape)}")
    if weight_map.shape[-2:] != original.shape[-2:]:
        raise ValueError(f"weight map {tuple(weight_map.shape[-2:])} does not match image {tuple(original.shape[-2:])}")
    w = weight_map.unsqueeze(-3)
    return w * original + (1 - w) * generated


@dataclass
class AugmentedSupportSet:
    images: torch.Tensor  # originals first, then fused images
    labels: torch.Tensor
    sources: torch.Tensor  # index of the originating support image
    weights: torch.Tensor | None = None  # (n*m*n_aug, g, g) weight grids of the fused entries

    def __len__(self):
        return len(self.labels)


def choose_variants(available: int, n_aug: int, rng: np.random.Generator) -> np.ndarray:
    if available < n_aug:
        raise DataError(f"need {n_aug} generated variants, only {available} cached")
    return rng.choice(available, size=n_aug, replace=False)


def augment_support_set(
    support_images: torch.Tensor,
    support_labels: torch.Tensor,
    support_ids: Sequence[str],
    generated_lookup: Mapping[str, torch.Tensor],
    net: FusionNetwork | None,
    n_aug: int,
    rng: np.random.Generator,
) -> AugmentedSupportSet:
    """Append n_aug fused images per support image, each mixing the original with a
    distinct, uniformly chosen cached variant. With ``net=None`` the variants are
    appended unfused."""
    count = len(support_images)
    base = torch.arange(count)
    if n_aug == 0:
        return AugmentedSupportSet(support_images, support_labels, base)
    partners = []
    for image_id in support_ids:
        try:
            variants = generated_lookup[image_id]
        except KeyError:
            raise DataError(f"no generated variants for support image '{image_id}'") from None
        partners.append(variants[torch.as_tensor(choose_variants(len(variants), n_aug, rng))])
    # order: all first variants, then all second variants, ...
    generated = torch.stack(partners, dim=1).reshape(n_aug * count, *support_images.shape[1:])
    originals = support_images.repeat(n_aug, 1, 1, 1)
    labels = support_labels.repeat(n_aug)
    sources = base.repeat(n_aug)
    weights = None
    if net is None:
        extra = generated.to(support_images.dtype)
    else:
        weights = predict_weight_grid(net, originals, generated.to(originals.dtype))
        extra = fuse_images(originals, generated.to(originals.dtype),
                            expand_weight_grid(weights, *support_images.shape[-2:]))
    return AugmentedSupportSet(
        torch.cat([support_images, extra]),
        torch.cat([support_labels, labels]),
        torch.cat([base, sources]),
        weights,
    )
