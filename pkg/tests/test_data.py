import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from metairnet.data import (
    ClassSplit,
    ImageDataset,
    build_class_splits,
    load_image_directory,
    load_manifest,
    sample_episode,
)
from metairnet.errors import DataError

from .conftest import random_dataset


# -- class splits -------------------------------------------------------------

def test_explicit_split_is_taken_verbatim():
    split = build_class_splits([1, 2, 3, 4, 5], {"classes": {"base": [1, 2], "val": [3], "novel": [4, 5]}})
    assert split.base_classes == {1, 2}
    assert split.val_classes == {3}
    assert split.novel_classes == {4, 5}


def test_ratio_split_sizes_follow_floor_rule():
    split = build_class_splits(range(10), {"ratios": (0.5, 0.2, 0.3), "seed": 7})
    sizes = (len(split.base_classes), len(split.val_classes), len(split.novel_classes))
    # recount: val = floor(0.2 * 10), novel = floor(0.3 * 10), base takes what is left
    n_val, n_novel = int(np.floor(0.2 * 10)), int(np.floor(0.3 * 10))
    assert sizes == (10 - n_val - n_novel, n_val, n_novel) == (5, 2, 3)
    assert split.all_classes == set(range(10))


def test_ratio_split_remainder_goes_to_base():
    split = build_class_splits(range(7), {"ratios": (0.5, 0.25, 0.25), "seed": 0})
    assert (len(split.base_classes), len(split.val_classes), len(split.novel_classes)) == (5, 1, 1)


def test_ratio_split_is_deterministic_and_seed_dependent():
    a = build_class_splits(range(20), {"ratios": (0.5, 0.25, 0.25), "seed": 3})
    b = build_class_splits(range(20), {"ratios": (0.5, 0.25, 0.25), "seed": 3})
    c = build_class_splits(range(20), {"ratios": (0.5, 0.25, 0.25), "seed": 4})
    assert a == b
    assert a != c


def test_overlapping_explicit_lists_rejected():
    with pytest.raises(DataError, match="overlap"):
        build_class_splits([1, 2, 3, 4], {"classes": {"base": [1, 2], "val": [3], "novel": [3, 4]}})


def test_empty_split_rejected():
    with pytest.raises(DataError, match="empty"):
        build_class_splits(range(3), {"ratios": (1.0, 0.0, 0.0), "seed": 0})
    with pytest.raises(DataError, match="empty"):
        ClassSplit(frozenset({1}), frozenset(), frozenset({2}))


def test_explicit_split_must_cover_dataset():
    with pytest.raises(DataError, match="cover"):
        build_class_splits(range(4), {"classes": {"base": [0], "val": [1], "novel": [2]}})
    with pytest.raises(DataError, match="absent"):
        build_class_splits(range(3), {"classes": {"base": [0], "val": [1], "novel": [2, 9]}})


@settings(max_examples=50, deadline=None)
@given(n_classes=st.integers(3, 40), seed=st.integers(0, 10_000),
       val=st.floats(0.05, 0.4), novel=st.floats(0.05, 0.4))
def test_ratio_splits_disjoint_and_covering(n_classes, seed, val, novel):
    ratios = (1 - val - novel, val, novel)
    try:
        split = build_class_splits(range(n_classes), {"ratios": ratios, "seed": seed})
    except DataError:
        assert int(val * n_classes) == 0 or int(novel * n_classes) == 0
        return
    assert not split.base_classes & split.val_classes
    assert not split.base_classes & split.novel_classes
    assert not split.val_classes & split.novel_classes
    assert split.all_classes == set(range(n_classes))


# -- episodes -----------------------------------------------------------------

def test_five_way_one_shot_sixteen_queries():
    ds = random_dataset(num_classes=6, per_class=17, size=8)
    ep = sample_episode(ds, ds.classes, 5, 1, 16, np.random.default_rng(0))
    assert len(ep.support) == 5
    assert len(ep.query) == 80


def test_minimal_episode_has_distinct_images():
    ds = random_dataset(num_classes=2, per_class=2, size=8)
    ep = sample_episode(ds, ds.classes, 1, 1, 1, np.random.default_rng(5))
    assert len(ep.support) == 1 and len(ep.query) == 1
    assert ep.support[0] != ep.query[0]


def _replay(dataset, pool, n, m, q, seed):
    """Independent reimplementation of the documented draw order."""
    rng = np.random.default_rng(seed)
    pool = sorted(pool)
    chosen = rng.choice(len(pool), size=n, replace=False)
    support, query = [], []
    for pos in chosen:
        cls = pool[pos]
        members = [i for i, lbl in enumerate(dataset.labels) if lbl == cls]
        order = rng.permutation(len(members))
        support += [members[k] for k in order[:m]]
        query += [members[k] for k in order[m:m + q]]
    return support, query


def test_episode_matches_replay_oracle():
    ds = random_dataset(num_classes=4, per_class=5, size=8)
    for seed in range(20):
        ep = sample_episode(ds, ds.classes, 2, 2, 2, np.random.default_rng(seed))
        support, query = _replay(ds, ds.classes, 2, 2, 2, seed)
        assert list(ep.support) == support
        assert list(ep.query) == query
        assert sorted(ep.support + ep.query) == sorted(support + query)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 4), m=st.integers(1, 3), q=st.integers(1, 3))
def test_episode_invariants(seed, n, m, q):
    ds = random_dataset(num_classes=5, per_class=6, size=4)
    ep = sample_episode(ds, ds.classes, n, m, q, np.random.default_rng(seed))
    again = sample_episode(ds, ds.classes, n, m, q, np.random.default_rng(seed))
    assert ep == again
    assert not set(ep.support) & set(ep.query)
    assert len(set(ep.support)) == n * m and len(set(ep.query)) == n * q
    for cls, local in ep.label_map.items():
        s = [i for i in ep.support if ds.labels[i] == cls]
        qq = [i for i in ep.query if ds.labels[i] == cls]
        assert (len(s), len(qq)) == (m, q)
        assert all(ep.support_labels[ep.support.index(i)] == local for i in s)
        assert all(ep.query_labels[ep.query.index(i)] == local for i in qq)
    assert sorted(ep.label_map.values()) == list(range(n))


def test_insufficient_images_names_class():
    images = torch.zeros(7, 3, 4, 4)
    labels = [0, 0, 0, 1, 1, 1, 2]
    ds = ImageDataset(images, labels, class_names=["a", "b", "sparrow"])
    with pytest.raises(DataError, match="sparrow"):
        sample_episode(ds, [0, 1, 2], 3, 1, 1, np.random.default_rng(0))


def test_insufficient_classes():
    ds = random_dataset(num_classes=2, per_class=3, size=4)
    with pytest.raises(DataError, match="2 classes"):
        sample_episode(ds, ds.classes, 3, 1, 1, np.random.default_rng(0))


def test_subset_keeps_ids_and_labels(small_dataset):
    sub = small_dataset.subset([1, 3])
    assert sub.classes == [1, 3]
    assert all(sub.image_ids[i].startswith(f"c{sub.labels[i]}/") for i in range(len(sub)))


# -- loading ------------------------------------------------------------------

def _write_tree(root, classes=2, per_class=3, value=128, size=(10, 12)):
    for c in range(classes):
        d = root / f"class_{c}"
        d.mkdir(parents=True)
        for i in range(per_class):
            Image.new("RGB", size, (value, value, value)).save(d / f"{i}.png")


def test_load_directory_counts_and_size(tmp_path):
    _write_tree(tmp_path)
    ds = load_image_directory(tmp_path, (64, 64))
    assert len(ds) == 6
    assert ds.images.shape == (6, 3, 64, 64)
    assert ds.classes == [0, 1]
    assert ds.class_names == ["class_0", "class_1"]


@pytest.mark.parametrize("pixel,expected", [(255, 1.0), (0, -1.0)])
def test_load_directory_rescales_endpoints(tmp_path, pixel, expected):
    _write_tree(tmp_path, classes=1, per_class=1, value=pixel, size=(8, 8))
    ds = load_image_directory(tmp_path, (8, 8), (-1.0, 1.0))
    assert torch.all(ds.images == expected)


def test_undecodable_file_is_skipped_and_reported(tmp_path):
    _write_tree(tmp_path)
    (tmp_path / "class_0" / "broken.png").write_bytes(b"not an image")
    ds = load_image_directory(tmp_path, (8, 8))
    assert len(ds) == 6
    assert len(ds.report.skipped) == 1
    assert "broken.png" in ds.report.skipped[0][0]


def test_empty_class_directory_is_an_error(tmp_path):
    _write_tree(tmp_path)
    (tmp_path / "class_9").mkdir()
    with pytest.raises(DataError, match="class_9"):
        load_image_directory(tmp_path, (8, 8))


def test_manifest_loading(tmp_path):
    _write_tree(tmp_path)
    (tmp_path / "list.txt").write_text("class_0/0.png\tbird_a\nclass_1/2.png\tbird_b\nclass_1/1.png\tbird_b\n")
    ds = load_manifest(tmp_path / "list.txt", (8, 8))
    assert len(ds) == 3
    assert ds.class_names == ["bird_a", "bird_b"]
    assert list(ds.labels) == [0, 1, 1]
