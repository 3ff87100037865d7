"""Datasets, class splits and episodic sampling for n-way-m-shot tasks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DataError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


@dataclass(frozen=True)
class LabeledImage:
    image: torch.Tensor  # (3, H, W), values in the dataset's value range
    label: int
    image_id: str


@dataclass
class IngestionReport:
    loaded: int = 0
    skipped: list[tuple[str, str]] = field(default_factory=list)


class ImageDataset:
    """Immutable collection of equally sized images with integer class labels.

    Images are stored channel-first as one float32 tensor of shape (N, 3, H, W).
    """

    def __init__(
        self,
        images: torch.Tensor,
        labels: Sequence[int],
        image_ids: Sequence[str] | None = None,
        class_names: Sequence[str] | None = None,
        value_range: tuple[float, float] = (-1.0, 1.0),
    ):
        if images.ndim != 4 or images.shape[1] != 3:
            raise DataError(f"images must have shape (N, 3, H, W), got {tuple(images.shape)}")
        labels = np.asarray(labels, dtype=np.int64)
        if len(labels) != images.shape[0]:
            raise DataError("number of labels does not match number of images")
        self.images = images.float().contiguous()
        self.images.requires_grad_(False)
        self.labels = labels
        self.labels.setflags(write=False)
        self.image_ids = list(image_ids) if image_ids is not None else [str(i) for i in range(len(labels))]
        if len(set(self.image_ids)) != len(self.image_ids):
            raise DataError("image ids must be unique")
        n_classes = int(labels.max()) + 1 if len(labels) else 0
        self.class_names = list(class_names) if class_names is not None else [str(c) for c in range(n_classes)]
        self.value_range = value_range
        self._by_class: dict[int, np.ndarray] = {
            int(c): np.flatnonzero(labels == c) for c in np.unique(labels)
        }
        self.report = IngestionReport(loaded=len(labels))

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx: int) -> LabeledImage:
        return LabeledImage(self.images[idx], int(self.labels[idx]), self.image_ids[idx])

    def __iter__(self) -> Iterator[LabeledImage]:
        for i in range(len(self)):
            yield self[i]

    @property
    def classes(self) -> list[int]:
        return sorted(self._by_class)

    @property
    def image_size(self) -> tuple[int, int]:
        return int(self.images.shape[2]), int(self.images.shape[3])

    def indices_of(self, cls: int) -> np.ndarray:
        return self._by_class.get(int(cls), np.empty(0, dtype=np.int64))

    def subset(self, classes: Iterable[int]) -> "ImageDataset":
        """Restrict to the given classes, keeping the original class ids."""
        classes = set(int(c) for c in classes)
        idx = np.flatnonzero(np.isin(self.labels, sorted(classes)))
        return ImageDataset(
            self.images[idx],
            self.labels[idx],
            [self.image_ids[i] for i in idx],
            self.class_names,
            self.value_range,
        )


@dataclass(frozen=True)
class ClassSplit:
    base_classes: frozenset[int]
    val_classes: frozenset[int]
    novel_classes: frozenset[int]

    def __post_init__(self):
        parts = {"base": self.base_classes, "val": self.val_classes, "novel": self.novel_classes}
        for name, cls in parts.items():
            if not cls:
                raise DataError(f"class split '{name}' is empty")
        names = list(parts)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                overlap = parts[a] & parts[b]
                if overlap:
                    raise DataError(f"class splits '{a}' and '{b}' overlap: {sorted(overlap)}")

    @property
    def all_classes(self) -> frozenset[int]:
        return self.base_classes | self.val_classes | self.novel_classes


def build_class_splits(classes: Iterable[int], split_spec: Mapping) -> ClassSplit:
    """Build a disjoint base/val/novel split.

    ``split_spec`` holds either ``{"classes": {"base": [...], "val": [...], "novel": [...]}}``
    or ``{"ratios": [train, val, test], "seed": int}``. Ratio splits give val and
    novel ``floor(ratio * n_classes)`` classes and assign the remainder to base.
    """
    classes = sorted(set(int(c) for c in classes))
    if "classes" in split_spec:
        lists = split_spec["classes"]
        split = ClassSplit(
            frozenset(int(c) for c in lists.get("base", ())),
            frozenset(int(c) for c in lists.get("val", ())),
            frozenset(int(c) for c in lists.get("novel", ())),
        )
        if classes:
            unknown = split.all_classes - set(classes)
            if unknown:
                raise DataError(f"split lists classes absent from the dataset: {sorted(unknown)}")
            missing = set(classes) - split.all_classes
            if missing:
                raise DataError(f"split does not cover classes: {sorted(missing)}")
        return split
    if "ratios" not in split_spec:
        raise DataError("split spec needs either 'classes' or 'ratios'")
    ratios = [float(r) for r in split_spec["ratios"]]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-6):
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(split_spec.get("seed", 0))
    order = [classes[i] for i in rng.permutation(len(classes))]
    n_val = math.floor(ratios[1] * len(classes))
    n_novel = math.floor(ratios[2] * len(classes))
    n_base = len(classes) - n_val - n_novel
    return ClassSplit(
        frozenset(order[:n_base]),
        frozenset(order[n_base:n_base + n_val]),
        frozenset(order[n_base + n_val:]),
    )


@dataclass(frozen=True)
class Episode:
    """One n-way-m-shot task, as dataset indices.

    ``support`` and ``query`` are grouped by episode class in sampling order;
    ``label_map`` sends original class ids to episode-local labels in [0, n).
    """

    n: int
    m: int
    q: int
    support: tuple[int, ...]
    query: tuple[int, ...]
    label_map: Mapping[int, int]

    @property
    def support_labels(self) -> torch.Tensor:
        return torch.arange(self.n).repeat_interleave(self.m)

    @property
    def query_labels(self) -> torch.Tensor:
        return torch.arange(self.n).repeat_interleave(self.q)

    def support_set(self, dataset: ImageDataset) -> list[LabeledImage]:
        return [dataset[i] for i in self.support]

    def query_set(self, dataset: ImageDataset) -> list[LabeledImage]:
        return [dataset[i] for i in self.query]


def sample_episode(
    dataset: ImageDataset,
    class_pool: Iterable[int],
    n: int,
    m: int,
    q: int,
    rng: np.random.Generator,
) -> Episode:
    """Sample an episode. Draw order: n classes without replacement from the
    sorted pool, then for each class one permutation of its images whose first
    m entries are support and next q are query."""
    if n < 1 or m < 1 or q < 1:
        raise DataError(f"n, m, q must be positive, got n={n} m={m} q={q}")
    pool = sorted(set(int(c) for c in class_pool))
    if len(pool) < n:
        raise DataError(f"class pool has {len(pool)} classes, episode needs {n}")
    chosen = rng.choice(len(pool), size=n, replace=False)
    support: list[int] = []
    query: list[int] = []
    label_map: dict[int, int] = {}
    for local, pos in enumerate(chosen):
        cls = pool[int(pos)]
        members = dataset.indices_of(cls)
        if len(members) < m + q:
            raise DataError(
                f"class {cls} ({dataset.class_names[cls] if cls < len(dataset.class_names) else cls}) "
                f"has {len(members)} images, episode needs {m + q}"
            )
        picked = members[rng.permutation(len(members))[: m + q]]
        support.extend(int(i) for i in picked[:m])
        query.extend(int(i) for i in picked[m:])
        label_map[cls] = local
    return Episode(n, m, q, tuple(support), tuple(query), label_map)


def _to_tensor(img: Image.Image, size: tuple[int, int], value_range: tuple[float, float]) -> torch.Tensor:
    img = img.convert("RGB")
    if img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    lo, hi = value_range
    arr = lo + (hi - lo) * arr
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _load_files(
    entries: Sequence[tuple[Path, str, str]],
    target_size: tuple[int, int],
    value_range: tuple[float, float],
) -> ImageDataset:
    class_names = sorted({cls for _, cls, _ in entries})
    class_index = {c: i for i, c in enumerate(class_names)}
    images, labels, ids = [], [], []
    report = IngestionReport()
    for path, cls, image_id in entries:
        try:
            with Image.open(path) as img:
                images.append(_to_tensor(img, target_size, value_range))
        except (OSError, ValueError) as exc:
            logger.warning("skipping undecodable image %s: %s", path, exc)
            report.skipped.append((str(path), str(exc)))
            continue
        labels.append(class_index[cls])
        ids.append(image_id)
    for cls in class_names:
        if class_index[cls] not in labels:
            raise DataError(f"class '{cls}' has no decodable images")
    ds = ImageDataset(torch.stack(images), labels, ids, class_names, value_range)
    report.loaded = len(labels)
    ds.report = report
    return ds


def load_image_directory(
    path: str | Path,
    target_size: tuple[int, int] = (64, 64),
    value_range: tuple[float, float] = (-1.0, 1.0),
) -> ImageDataset:
    """Load a class-per-subdirectory image tree.

    Class ids follow the sorted subdirectory names. Undecodable files are skipped
    and listed in ``dataset.report``; an empty class directory is an error.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    entries = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f for f in class_dir.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"class directory '{class_dir}' contains no images")
        entries.extend((f, class_dir.name, f"{class_dir.name}/{f.name}") for f in files)
    if not entries:
        raise DataError(f"no class subdirectories under {root}")
    return _load_files(entries, target_size, value_range)


def load_manifest(
    manifest: str | Path,
    target_size: tuple[int, int] = (64, 64),
    value_range: tuple[float, float] = (-1.0, 1.0),
) -> ImageDataset:
    """Load images listed as ``relative_path<TAB>class_id`` lines."""
    manifest = Path(manifest)
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    entries = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{manifest}:{lineno}: expected 'path<TAB>class_id'")
        rel, cls = parts[0].strip(), parts[1].strip()
        entries.append((manifest.parent / rel, cls, rel))
    if not entries:
        raise DataError(f"manifest {manifest} lists no images")
    return _load_files(entries, target_size, value_range)
