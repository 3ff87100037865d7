import json
import shutil

import numpy as np
import pytest
import torch

from metairnet.adapt import AdaptConfig
from metairnet.cache import (
    GeneratedImageCache,
    VariantLookup,
    from_uint8,
    jitter_lookup,
    populate_cache,
    to_uint8,
)
from metairnet.errors import DataError

from .conftest import random_dataset

FAST = AdaptConfig(steps=3, num_variants=10)


def png_count(root):
    return len(list(root.rglob("*.png")))


def test_uint8_round_trip_is_lossless_on_grid():
    arr = np.random.default_rng(0).integers(0, 256, size=(5, 6, 3), dtype=np.uint8)
    assert np.array_equal(to_uint8(from_uint8(arr)), arr)


def test_key_depends_on_pixels_and_config(tmp_path):
    img = torch.rand(3, 8, 8)
    a = GeneratedImageCache(tmp_path, FAST)
    b = GeneratedImageCache(tmp_path, AdaptConfig(steps=4))
    assert a.key(img) == a.key(img.clone())
    assert a.key(img) != b.key(img)
    assert a.key(img) != a.key(torch.rand(3, 8, 8))
    assert GeneratedImageCache(tmp_path, FAST, "gen-a").key(img) != GeneratedImageCache(tmp_path, FAST, "gen-b").key(img)


def test_entry_incomplete_until_meta_written(tmp_path):
    cache = GeneratedImageCache(tmp_path, AdaptConfig(num_variants=2))
    img = torch.rand(3, 8, 8)
    d = cache.entry_dir(img)
    d.mkdir(parents=True)
    for i in range(2):
        from PIL import Image

        Image.fromarray(to_uint8(img)).save(d / f"{i}.png")
    assert not cache.is_complete(img)
    cache.write(img, torch.stack([img, img]), {"seed": 1})
    assert cache.is_complete(img)
    assert cache.read_meta(img)["seed"] == 1
    assert cache.load_variants(img).shape == (2, 8, 8, 3)


def test_six_images_ten_variants(tmp_path, tiny_generator, feature_extractor):
    ds = random_dataset(num_classes=2, per_class=3, size=16)
    cache = GeneratedImageCache(tmp_path, FAST)
    assert populate_cache(cache, ds, tiny_generator, feature_extractor, seed=0) == 6
    assert png_count(tmp_path) == 60
    meta = json.loads(next(tmp_path.rglob("meta.txt")).read_text())
    assert meta["config_hash"] == cache.config_hash
    assert len(meta["loss_trace"]) == 3
    lookup = cache.lookup(ds)
    assert lookup[ds.image_ids[0]].shape == (10, 3, 16, 16)


def test_rerun_is_a_no_op(tmp_path, tiny_generator, feature_extractor):
    ds = random_dataset(num_classes=2, per_class=3, size=16)
    cache = GeneratedImageCache(tmp_path, FAST)
    populate_cache(cache, ds, tiny_generator, feature_extractor, seed=0)
    stamps = {p: p.stat().st_mtime_ns for p in tmp_path.rglob("*")}
    assert populate_cache(cache, ds, tiny_generator, feature_extractor, seed=0) == 0
    assert {p: p.stat().st_mtime_ns for p in tmp_path.rglob("*")} == stamps


def test_interrupted_run_resumes_missing_entries_only(tmp_path, tiny_generator, feature_extractor):
    ds = random_dataset(num_classes=2, per_class=3, size=16)
    cache = GeneratedImageCache(tmp_path, FAST)
    populate_cache(cache, ds, tiny_generator, feature_extractor, seed=0)
    before = {ds.image_ids[i]: cache.load_variants(ds.images[i]) for i in range(len(ds))}
    entries = sorted(p for p in tmp_path.iterdir() if p.is_dir())
    for d in entries[:3]:
        shutil.rmtree(d)
    (entries[3] / "meta.txt").unlink()  # half-written entry
    assert populate_cache(cache, ds, tiny_generator, feature_extractor, seed=0) == 4
    assert png_count(tmp_path) == 60
    # per-image seeds are content-derived, so redone entries reproduce the originals
    for i in range(len(ds)):
        assert np.array_equal(cache.load_variants(ds.images[i]), before[ds.image_ids[i]])


def test_shards_partition_the_work(tmp_path, tiny_generator, feature_extractor):
    ds = random_dataset(num_classes=2, per_class=3, size=16)
    cache = GeneratedImageCache(tmp_path, AdaptConfig(steps=2, num_variants=2))
    counts = [populate_cache(cache, ds, tiny_generator, feature_extractor, seed=0, shard=(i, 3)) for i in range(3)]
    assert counts == [2, 2, 2]
    assert not cache.missing(ds)


def test_lookup_names_missing_images(tmp_path):
    ds = random_dataset(num_classes=2, per_class=2, size=8)
    with pytest.raises(DataError, match="c0/0.png"):
        GeneratedImageCache(tmp_path, FAST).lookup(ds)


def test_variant_lookup_mapping():
    lk = VariantLookup({"a": torch.zeros(2, 3, 4, 4)})
    assert "a" in lk and "b" not in lk
    with pytest.raises(DataError, match="'b'"):
        lk["b"]
    merged = lk.merged(VariantLookup({"b": np.zeros((1, 4, 4, 3), dtype=np.uint8)}))
    assert len(merged) == 2
    assert torch.all(merged["b"] == -1.0)


def test_jitter_lookup_is_deterministic():
    ds = random_dataset(num_classes=2, per_class=2, size=16)
    a, b = jitter_lookup(ds, 3, 0.1, seed=0), jitter_lookup(ds, 3, 0.1, seed=0)
    assert set(a) == set(ds.image_ids)
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert a[ds.image_ids[0]].shape == (3, 3, 16, 16)
