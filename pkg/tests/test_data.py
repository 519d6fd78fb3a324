import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cstrain.data import (BadMagicError, CountMismatchError, Dataset, FoldFeeder,
                          SeparateFolds, SlidingFold, TruncatedFileError, Whole, load_idx,
                          next_fold, parse_feed, subset)

from conftest import write_idx, write_mnist_like


def indexed_dataset(n):
    """Dataset whose single feature is the sample index."""
    return Dataset(np.arange(n, dtype=np.float64)[:, None], np.arange(n) % 10)


def served(batch):
    return batch.inputs[:, 0].astype(int).tolist()


# -- IDX ------------------------------------------------------------------------

def test_two_image_fixture(tmp_path):
    images = np.zeros((2, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[1, 27, 27] = 51
    img, lab = write_mnist_like(tmp_path, images, [3, 7])
    data = load_idx(img, lab)
    assert data.images.shape == (2, 784)
    assert data.images[0, 0] == 1.0
    assert data.images[1, 783] == pytest.approx(0.2)
    assert data.labels.tolist() == [3, 7]


def test_gzip_is_detected(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (5, 28, 28))
    plain = load_idx(*write_mnist_like(tmp_path, images, [0, 1, 2, 3, 4], "a"))
    packed = load_idx(*write_mnist_like(tmp_path, images, [0, 1, 2, 3, 4], "b", compress=True))
    assert np.array_equal(plain.images, packed.images)
    assert np.array_equal(plain.labels, packed.labels)


def test_pixel_range(tmp_path):
    rng = np.random.default_rng(1)
    data = load_idx(*write_mnist_like(tmp_path, rng.integers(0, 256, (20, 28, 28)),
                                      rng.integers(0, 10, 20)))
    assert data.images.min() >= 0 and data.images.max() <= 1


def test_bad_magic(tmp_path):
    img = write_idx(tmp_path / "img", np.zeros((1, 28, 28)), 2049)
    lab = write_idx(tmp_path / "lab", [1], 2049)
    with pytest.raises(BadMagicError):
        load_idx(img, lab)
    with pytest.raises(BadMagicError):
        load_idx(write_idx(tmp_path / "img2", np.zeros((1, 28, 28)), 2051),
                 write_idx(tmp_path / "lab2", [1], 2051))


def test_truncated(tmp_path):
    img = write_idx(tmp_path / "img", np.zeros((3, 28, 28)), 2051)
    img.write_bytes(img.read_bytes()[:-10])
    lab = write_idx(tmp_path / "lab", [1, 2, 3], 2049)
    with pytest.raises(TruncatedFileError):
        load_idx(img, lab)
    short = tmp_path / "short"
    short.write_bytes(struct.pack(">i", 2051) + b"\x00\x00")
    with pytest.raises(TruncatedFileError):
        load_idx(short, lab)


def test_truncated_gzip(tmp_path):
    img = write_idx(tmp_path / "img.gz", np.zeros((3, 28, 28)), 2051, compress=True)
    img.write_bytes(img.read_bytes()[:-12])
    lab = write_idx(tmp_path / "lab", [1, 2, 3], 2049)
    with pytest.raises(TruncatedFileError):
        load_idx(img, lab)


def test_count_mismatch(tmp_path):
    img, lab = write_mnist_like(tmp_path, np.zeros((3, 28, 28)), [1, 2])
    with pytest.raises(CountMismatchError):
        load_idx(img, lab)


# -- subset ---------------------------------------------------------------------------

def test_subset_full_is_permutation():
    data = indexed_dataset(50)
    sub = subset(data, 50, seed=3)
    assert sorted(sub.images[:, 0].astype(int)) == list(range(50))
    assert np.array_equal(sub.labels, sub.images[:, 0].astype(int) % 10)


def test_subset_no_duplicates_and_seeded():
    data = indexed_dataset(6000)
    a, b = subset(data, 1000, seed=1), subset(data, 1000, seed=1)
    assert len(a) == 1000
    assert np.unique(a.images[:, 0]).size == 1000
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, subset(data, 1000, seed=2).images)


def test_subset_too_large():
    with pytest.raises(ValueError):
        subset(indexed_dataset(5), 6, seed=0)


# -- feeders --------------------------------------------------------------------------

def test_separate_folds_cycle():
    data = indexed_dataset(60)
    feeder = FoldFeeder(SeparateFolds(6))
    seen = []
    for _ in range(7):
        batch, feeder = next_fold(feeder, data)
        seen.append(served(batch))
    assert seen[0] == list(range(10))
    assert seen[5] == list(range(50, 60))
    assert seen[6] == seen[0]


def test_sliding_wraps_around():
    data = indexed_dataset(10)
    batch, feeder = next_fold(FoldFeeder(SlidingFold(4, 2), cursor=8), data)
    assert served(batch) == [8, 9, 0, 1]
    assert feeder.cursor == 0


def test_whole_always_full():
    data = indexed_dataset(12)
    feeder = FoldFeeder(Whole(), cursor=5)
    for _ in range(3):
        batch, feeder = next_fold(feeder, data)
        assert served(batch) == list(range(12))
    assert feeder.cursor == 5


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n),
                                                        st.integers(0, 50))))
def test_folds_cover_each_index_once(n_k_start):
    n, k, start = n_k_start
    data = indexed_dataset(n)
    feeder = FoldFeeder(SeparateFolds(k), cursor=start)
    served_all = []
    for _ in range(k):
        batch, feeder = next_fold(feeder, data)
        served_all += served(batch)
    assert sorted(served_all) == list(range(n))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 20), st.integers(1, 10), st.integers(0, 500))
def test_sliding_stride_equal_window_sweeps(w, sweeps, start):
    n = w * sweeps
    data = indexed_dataset(n)
    feeder = FoldFeeder(SlidingFold(w, w), cursor=start)
    served_all = []
    for _ in range(sweeps):
        batch, feeder = next_fold(feeder, data)
        assert len(batch) == w
        served_all += served(batch)
    assert sorted(served_all) == list(range(n))


def test_sliding_window_equal_batches_when_not_dividing():
    data = indexed_dataset(10)
    feeder = FoldFeeder(SlidingFold(4, 3))
    seen = set()
    for _ in range(4):
        batch, feeder = next_fold(feeder, data)
        assert len(batch) == 4
        seen.update(served(batch))
    assert seen == set(range(10))


def test_next_fold_deterministic():
    data = indexed_dataset(30)
    f = FoldFeeder(SlidingFold(7, 5), cursor=3)
    (b1, f1), (b2, f2) = next_fold(f, data), next_fold(f, data)
    assert served(b1) == served(b2) and f1 == f2


def test_feeder_validation():
    with pytest.raises(ValueError):
        next_fold(FoldFeeder(SeparateFolds(11)), indexed_dataset(10))
    with pytest.raises(ValueError):
        next_fold(FoldFeeder(SlidingFold(11, 1)), indexed_dataset(10))
    with pytest.raises(ValueError):
        SlidingFold(3, 0)


@pytest.mark.parametrize("text, mode", [
    ("whole", Whole()), ("folds:6", SeparateFolds(6)), ("folds", SeparateFolds(6)),
    ("sliding:1000,100", SlidingFold(1000, 100)),
])
def test_parse_feed(text, mode):
    assert parse_feed(text) == mode


@pytest.mark.parametrize("text", ["fold:3", "sliding", "whole:2", "folds:x"])
def test_parse_feed_rejects(text):
    with pytest.raises(ValueError):
        parse_feed(text)
