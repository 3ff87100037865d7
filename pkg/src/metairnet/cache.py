"""Content-addressed store of generator variants, one folder per source image:

    <root>/<key>/<variant-index>.png
    <root>/<key>/meta.txt        (JSON: config hash, seed, loss trace; written last)

The key hashes the quantised source pixels together with the adaptation config
hash, so entries survive dataset reorganisation.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
from PIL import Image

from .adapt import AdaptConfig, adapt_generator_batch, sample_perturbed_images
from .data import ImageDataset
from .errors import DataError

logger = logging.getLogger(__name__)


def to_uint8(image: torch.Tensor, value_range=(-1.0, 1.0)) -> np.ndarray:
    """(3, H, W) float image -> (H, W, 3) uint8 array."""
    lo, hi = value_range
    arr = ((image.detach().float().permute(1, 2, 0).numpy() - lo) / (hi - lo) * 255.0).round()
    return np.clip(arr, 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray, value_range=(-1.0, 1.0)) -> torch.Tensor:
    lo, hi = value_range
    return torch.from_numpy(lo + (hi - lo) * (arr.astype(np.float32) / 255.0)).permute(2, 0, 1).contiguous()


def config_hash(config) -> str:
    if dataclasses.is_dataclass(config):
        config = dataclasses.asdict(config)
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def image_key(image: torch.Tensor, cfg_hash: str) -> str:
    h = hashlib.sha256(to_uint8(image).tobytes())
    h.update(cfg_hash.encode())
    return h.hexdigest()[:24]


class GeneratedImageCache:
    def __init__(self, root: str | Path, adapt_config: AdaptConfig, generator_id: str = ""):
        self.root = Path(root)
        self.adapt_config = adapt_config
        self.config_hash = config_hash({"adapt": dataclasses.asdict(adapt_config), "generator": generator_id})

    def key(self, image: torch.Tensor) -> str:
        return image_key(image, self.config_hash)

    def entry_dir(self, image: torch.Tensor) -> Path:
        return self.root / self.key(image)

    def is_complete(self, image: torch.Tensor) -> bool:
        d = self.entry_dir(image)
        k = self.adapt_config.num_variants
        return (d / "meta.txt").is_file() and all((d / f"{i}.png").is_file() for i in range(k))

    def missing(self, dataset: ImageDataset) -> list[str]:
        return [item.image_id for item in dataset if not self.is_complete(item.image)]

    def write(self, image: torch.Tensor, variants: torch.Tensor, meta: dict) -> None:
        d = self.entry_dir(image)
        d.mkdir(parents=True, exist_ok=True)
        for i, v in enumerate(variants):
            Image.fromarray(to_uint8(v)).save(d / f"{i}.png")
        meta = {"config_hash": self.config_hash, **meta}
        tmp = d / "meta.txt.tmp"
        tmp.write_text(json.dumps(meta))
        tmp.replace(d / "meta.txt")

    def read_meta(self, image: torch.Tensor) -> dict:
        return json.loads((self.entry_dir(image) / "meta.txt").read_text())

    def load_variants(self, image: torch.Tensor) -> np.ndarray:
        d = self.entry_dir(image)
        arrs = []
        for i in range(self.adapt_config.num_variants):
            with Image.open(d / f"{i}.png") as img:
                arrs.append(np.asarray(img.convert("RGB")))
        return np.stack(arrs)

    def lookup(self, dataset: ImageDataset) -> "VariantLookup":
        """Load every variant of every dataset image; raises naming missing images."""
        missing = self.missing(dataset)
        if missing:
            shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
            raise DataError(f"generated-image cache misses {len(missing)} image(s): {shown}")
        return VariantLookup({item.image_id: self.load_variants(item.image) for item in dataset},
                             dataset.value_range)


class VariantLookup(Mapping[str, torch.Tensor]):
    """image id -> (k, 3, H, W) float tensor of generated variants.

    Entries may be held as uint8 arrays (as read from disk) and are converted on access.
    """

    def __init__(self, entries: Mapping[str, np.ndarray | torch.Tensor], value_range=(-1.0, 1.0)):
        self._entries = dict(entries)
        self.value_range = value_range

    def __getitem__(self, image_id: str) -> torch.Tensor:
        if image_id not in self._entries:
            raise DataError(f"no generated variants for image '{image_id}'")
        entry = self._entries[image_id]
        if isinstance(entry, torch.Tensor):
            return entry
        return torch.stack([from_uint8(a, self.value_range) for a in entry])

    def __contains__(self, image_id) -> bool:
        return image_id in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def merged(self, other: "VariantLookup") -> "VariantLookup":
        return VariantLookup({**self._entries, **other._entries}, self.value_range)


def _entry_seed(seed: int, key: str) -> int:
    return int(np.random.SeedSequence([seed, int(key[:15], 16)]).generate_state(1, dtype=np.uint64)[0] >> 1)


def populate_cache(
    cache: GeneratedImageCache,
    dataset: ImageDataset,
    generator: torch.nn.Module,
    feature_extractor: Callable,
    seed: int = 0,
    batch_size: int = 32,
    shard: tuple[int, int] = (0, 1),
    progress: Callable[[int, int], None] | None = None,
) -> int:
    """Adapt the generator to every dataset image lacking a complete entry and
    store ``num_variants`` perturbed samples. Returns the number of new entries.

    Each image's noise comes from a stream seeded by (seed, image key), so results
    do not depend on batch composition order or sharding.
    """
    cfg = cache.adapt_config
    shard_idx, n_shards = shard
    todo = [
        i for i in range(len(dataset))
        if i % n_shards == shard_idx and not cache.is_complete(dataset.images[i])
    ]
    done = 0
    for start in range(0, len(todo), batch_size):
        idx = todo[start:start + batch_size]
        targets = dataset.images[idx]
        keys = [cache.key(t) for t in targets]
        seeds = [_entry_seed(seed, k) for k in keys]
        rngs = [torch.Generator().manual_seed(s) for s in seeds]
        states = adapt_generator_batch(generator, targets, cfg, rngs, feature_extractor)
        for i, st, rng, s in zip(idx, states, rngs, seeds):
            sigma = cfg.perturb_sigma * float(st.noise.latent.std())  # relative to the adapted latent's spread
            variants = sample_perturbed_images(st, sigma, cfg.num_variants, rng)
            trace = [[r.step, r.total, r.l1, r.perceptual, r.em] for r in st.loss_trace]
            cache.write(dataset.images[i], variants, {"seed": s, "image_id": dataset.image_ids[i], "loss_trace": trace})
        done += len(idx)
        if progress:
            progress(done, len(todo))
        logger.info("cached %d/%d images", done, len(todo))
    return len(todo)


def jitter_lookup(dataset: ImageDataset, k: int, magnitude: float, seed: int) -> VariantLookup:
    """Lookup of k jittered copies per image, the non-generative mixing source."""
    from .augment import jitter_augment

    out = {}
    for i, item in enumerate(dataset):
        rng = np.random.default_rng([seed, i])
        out[item.image_id] = torch.stack([jitter_augment(item.image, magnitude, rng) for _ in range(k)])
    return VariantLookup(out, dataset.value_range)
