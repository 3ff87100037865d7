"""Procedural fine-grained toy dataset: small "bird" glyphs whose classes differ
only in body colour and wing marking, with per-image pose, size and background
variation."""

from __future__ import annotations

import colorsys
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .data import ImageDataset

PATTERNS = ("stripes", "dots", "solid", "bar")
_SUPERSAMPLE = 2


def _class_params(num_classes: int, seed: int, hue_step: float = 0.08) -> list[dict]:
    rng = np.random.default_rng(seed)
    n_hues = math.ceil(num_classes / len(PATTERNS))
    hues = (rng.uniform(0, 1) + np.arange(n_hues) * hue_step) % 1.0
    params = []
    for c in range(num_classes):
        hue = hues[c // len(PATTERNS)]
        params.append({
            "hue": float(hue),
            "pattern": PATTERNS[c % len(PATTERNS)],
            "beak": float(rng.uniform(0.10, 0.22)),
            "tail": float(rng.uniform(0.15, 0.35)),
        })
    return params


def _rgb(h: float, s: float, v: float) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb(h % 1.0, min(max(s, 0), 1), min(max(v, 0), 1))
    return int(r * 255), int(g * 255), int(b * 255)


def render_bird(params: dict, size: int, rng: np.random.Generator) -> Image.Image:
    s = size * _SUPERSAMPLE
    bg_h = rng.uniform(0, 1)
    top = np.array(_rgb(bg_h, rng.uniform(0.1, 0.4), rng.uniform(0.5, 0.95)), dtype=np.float32)
    bottom = np.array(_rgb(bg_h + 0.1, rng.uniform(0.1, 0.4), rng.uniform(0.3, 0.8)), dtype=np.float32)
    t = np.linspace(0, 1, s, dtype=np.float32)[:, None, None]
    bg = (1 - t) * top + t * bottom + rng.normal(0, 6, size=(s, s, 3))
    img = Image.fromarray(np.clip(bg, 0, 255).astype(np.uint8).repeat(1, axis=1))
    draw = ImageDraw.Draw(img)

    scale = rng.uniform(0.75, 1.0)
    cx = s * rng.uniform(0.4, 0.6)
    cy = s * rng.uniform(0.45, 0.6)
    bw, bh = 0.30 * s * scale, 0.19 * s * scale
    facing = 1 if rng.uniform() < 0.5 else -1
    hue = params["hue"] + rng.normal(0, 0.015)
    body = _rgb(hue, rng.uniform(0.6, 0.8), rng.uniform(0.65, 0.9))
    dark = _rgb(hue + 0.5, 0.5, 0.25)

    tail = params["tail"] * s * scale
    tx = cx - facing * bw
    draw.polygon([(tx, cy), (tx - facing * tail, cy - 0.12 * s * scale), (tx - facing * tail, cy + 0.05 * s * scale)], fill=dark)
    draw.ellipse([cx - bw, cy - bh, cx + bw, cy + bh], fill=body)
    hr = 0.11 * s * scale
    hx, hy = cx + facing * bw * 0.9, cy - bh * 0.9
    draw.ellipse([hx - hr, hy - hr, hx + hr, hy + hr], fill=body)
    beak = params["beak"] * s * scale
    bx = hx + facing * hr * 0.9
    draw.polygon([(bx, hy - hr * 0.3), (bx + facing * beak, hy), (bx, hy + hr * 0.3)], fill=(230, 170, 40))
    er = max(1.5, 0.02 * s * scale)
    ex = hx + facing * hr * 0.35
    draw.ellipse([ex - er, hy - er * 1.5 - er, ex + er, hy - er * 1.5 + er], fill=(10, 10, 10))

    # wing marking
    wx0, wx1 = cx - bw * 0.6, cx + bw * 0.5
    wy0, wy1 = cy - bh * 0.55, cy + bh * 0.45
    pattern = params["pattern"]
    if pattern == "stripes":
        for k in range(4):
            x = wx0 + (wx1 - wx0) * (k + 0.5) / 4
            draw.line([(x, wy0), (x - facing * bw * 0.15, wy1)], fill=dark, width=max(1, int(0.025 * s)))
    elif pattern == "dots":
        r = 0.025 * s * scale
        for k in range(5):
            x = wx0 + (wx1 - wx0) * rng.uniform(0.1, 0.9)
            y = wy0 + (wy1 - wy0) * rng.uniform(0.1, 0.9)
            draw.ellipse([x - r, y - r, x + r, y + r], fill=dark)
    elif pattern == "solid":
        draw.ellipse([wx0, wy0, wx1, wy1], fill=dark)
    else:
        draw.rectangle([wx0, cy - bh * 0.12, wx1, cy + bh * 0.12], fill=dark)
    return img.resize((size, size), Image.BILINEAR)


def make_toy_dataset(
    num_classes: int = 20,
    images_per_class: int = 20,
    size: int = 64,
    seed: int = 0,
    value_range: tuple[float, float] = (-1.0, 1.0),
    hue_step: float = 0.08,
) -> ImageDataset:
    """Render ``num_classes`` x ``images_per_class`` images. Classes combine one of
    a few neighbouring body hues (``hue_step`` apart) with one wing marking."""
    params = _class_params(num_classes, seed, hue_step)
    rng = np.random.default_rng(seed + 1)
    lo, hi = value_range
    images, labels, ids = [], [], []
    for c, p in enumerate(params):
        for i in range(images_per_class):
            arr = np.asarray(render_bird(p, size, rng), dtype=np.float32) / 255.0
            images.append(torch.from_numpy(lo + (hi - lo) * arr).permute(2, 0, 1))
            labels.append(c)
            ids.append(f"class_{c:03d}/{i:04d}.png")
    names = [f"class_{c:03d}" for c in range(num_classes)]
    return ImageDataset(torch.stack(images).contiguous(), labels, ids, names, value_range)


def write_toy_dataset(root: str | Path, **kwargs) -> ImageDataset:
    """Render the toy dataset into a class-per-subdirectory PNG tree."""
    ds = make_toy_dataset(**kwargs)
    root = Path(root)
    lo, hi = ds.value_range
    for item in ds:
        path = root / item.image_id
        path.parent.mkdir(parents=True, exist_ok=True)
        arr = ((item.image.permute(1, 2, 0).numpy() - lo) / (hi - lo) * 255.0).round()
        Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8)).save(path)
    return ds
