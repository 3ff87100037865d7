"""Baseline augmentations: flip, feature noise, mixup variants, cutmix, jitter and
the fixed binary grid mix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .fusion import expand_weight_grid, fuse_images

KINDS = ("flip", "gaussian", "mixup", "manifold_mixup", "cutmix", "jitter", "manual_grid")


@dataclass
class AugmentationSpec:
    kind: str
    gaussian_sigma: float = 0.01
    cutmix_area: tuple[float, float] = (0.1, 0.5)
    jitter_magnitude: float = 0.1
    manual_pattern: list[list[int]] = field(default_factory=lambda: [[1, 0, 1], [0, 1, 0], [1, 0, 1]])

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind '{self.kind}'")
        if self.gaussian_sigma < 0 or self.jitter_magnitude < 0:
            raise ValueError("noise magnitudes must be non-negative")
        lo, hi = self.cutmix_area
        if not 0 <= lo <= hi <= 1:
            raise ValueError("cutmix area bounds must satisfy 0 <= lo <= hi <= 1")
        if self.kind == "manual_grid":
            _binary_pattern(self.manual_pattern)


def flip_augment(image: torch.Tensor) -> torch.Tensor:
    return image.flip(-1)


def gaussian_feature_augment(features: torch.Tensor, sigma: float = 0.01,
                             rng: torch.Generator | None = None) -> torch.Tensor:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return features.clone()
    return features + sigma * torch.randn(features.shape, generator=rng, dtype=features.dtype)


def mixup_images(a: torch.Tensor, b: torch.Tensor, lam: float) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    return lam * a + (1 - lam) * b


def manifold_mixup_embed(emb_a: torch.Tensor, emb_b: torch.Tensor, lam: float) -> torch.Tensor:
    return mixup_images(emb_a, emb_b, lam)


def random_region(height: int, width: int, rng: np.random.Generator,
                  area: tuple[float, float] = (0.1, 0.5)) -> tuple[int, int, int, int]:
    """Random (top, left, h, w) rectangle with area fraction ~ U[area]."""
    frac = rng.uniform(*area)
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    h = int(round(np.clip(np.sqrt(frac * height * width * aspect), 1, height)))
    w = int(round(np.clip(frac * height * width / h, 1, width)))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return top, left, h, w


def cutmix_images(a: torch.Tensor, b: torch.Tensor, region: tuple[int, int, int, int] | None = None,
                  rng: np.random.Generator | None = None, area: tuple[float, float] = (0.1, 0.5)) -> torch.Tensor:
    """Copy of a with the (top, left, h, w) region taken from b; a random region
    is drawn from ``rng`` when none is given."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    H, W = a.shape[-2:]
    if region is None:
        if rng is None:
            raise ValueError("either region or rng is required")
        region = random_region(H, W, rng, area)
    top, left, h, w = region
    if top < 0 or left < 0 or h < 0 or w < 0 or top + h > H or left + w > W:
        raise ValueError(f"region {region} outside a {H}x{W} image")
    out = a.clone()
    out[..., top:top + h, left:left + w] = b[..., top:top + h, left:left + w]
    return out


def shift_image(image: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """Translate content by (dy, dx) pixels, replicating edge pixels into the gap."""
    H, W = image.shape[-2:]
    rows = (torch.arange(H) - dy).clamp(0, H - 1)
    cols = (torch.arange(W) - dx).clamp(0, W - 1)
    return image.index_select(-2, rows).index_select(-1, cols)


def jitter_augment(image: torch.Tensor, magnitude: float, rng: np.random.Generator) -> torch.Tensor:
    """Random integer shift of up to ``magnitude`` of each side, then a random
    crop-and-resize keeping at least (1 - magnitude) of each side."""
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    if magnitude == 0:
        return image.clone()
    H, W = image.shape[-2:]
    max_dy, max_dx = int(magnitude * H), int(magnitude * W)
    dy = int(rng.integers(-max_dy, max_dy + 1))
    dx = int(rng.integers(-max_dx, max_dx + 1))
    out = shift_image(image, dy, dx)
    scale = rng.uniform(1 - magnitude, 1.0)
    ch, cw = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    top = int(rng.integers(0, H - ch + 1))
    left = int(rng.integers(0, W - cw + 1))
    crop = out[..., top:top + ch, left:left + cw]
    if (ch, cw) == (H, W):
        return crop.clone()
    squeeze = crop.ndim == 3
    crop = crop.unsqueeze(0) if squeeze else crop
    res = F.interpolate(crop, size=(H, W), mode="bilinear", align_corners=False)
    return res[0] if squeeze else res


def _binary_pattern(pattern) -> torch.Tensor:
    p = torch.as_tensor(pattern, dtype=torch.float32)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError("grid pattern must be a square matrix")
    if not bool(((p == 0) | (p == 1)).all()):
        raise ValueError("grid pattern must contain only 0 and 1")
    return p


def manual_grid_mix(a: torch.Tensor, b: torch.Tensor, binary_pattern) -> torch.Tensor:
    """Fixed block mix: cells with pattern 1 come from a, cells with 0 from b."""
    p = _binary_pattern(binary_pattern).to(a.dtype)
    return fuse_images(a, b, expand_weight_grid(p, *a.shape[-2:]))
