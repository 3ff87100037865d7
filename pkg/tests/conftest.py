from __future__ import annotations

import numpy as np
import pytest
import torch

from metairnet.data import ImageDataset
from metairnet.generator import ConvFeatureExtractor, ToyGenerator


def random_dataset(num_classes: int = 4, per_class: int = 6, size: int = 16, seed: int = 0) -> ImageDataset:
    gen = torch.Generator().manual_seed(seed)
    n = num_classes * per_class
    images = torch.rand(n, 3, size, size, generator=gen) * 2 - 1
    labels = [c for c in range(num_classes) for _ in range(per_class)]
    ids = [f"c{c}/{i}.png" for c in range(num_classes) for i in range(per_class)]
    return ImageDataset(images, labels, ids, [f"c{c}" for c in range(num_classes)])


@pytest.fixture
def small_dataset() -> ImageDataset:
    return random_dataset()


@pytest.fixture
def tiny_generator() -> ToyGenerator:
    torch.manual_seed(0)
    return ToyGenerator(num_classes=3, latent_dim=8, embed_dim=4, image_size=16, width=0.05).eval()


@pytest.fixture
def feature_extractor() -> ConvFeatureExtractor:
    return ConvFeatureExtractor(channels=(4, 8), seed=0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
