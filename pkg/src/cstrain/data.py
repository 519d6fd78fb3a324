"""MNIST-style IDX loading and the fold feeders used by the fitness function."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Union

import numpy as np

from .network import Batch

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049
GZIP_MAGIC = b"\x1f\x8b"


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == GZIP_MAGIC:
        try:
            data = gzip.decompress(data)
        except (EOFError, OSError) as exc:
            raise TruncatedFileError(f"{path}: corrupt gzip stream ({exc})") from None
    return data


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzipped) into an array."""
    data = _read_bytes(path)
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">i", data[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic {magic}, expected {expected_magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise TruncatedFileError(f"{path}: expected {size} data bytes, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N x pixels, float64 in [0, 1]
    labels: np.ndarray  # N, int64

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatchError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self):
        return self.labels.shape[0]

    def take(self, indices) -> Batch:
        return Batch(self.images[indices], self.labels[indices])

    def as_batch(self) -> Batch:
        return Batch(self.images, self.labels)


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.ndim != 3:
        raise IdxError(f"{images_path}: expected 3 dimensions, got {images.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images_path} has {images.shape[0]} images, {labels_path} has {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(flat, labels.astype(np.int64))


def subset(dataset: Dataset, count: int, seed) -> Dataset:
    """Seeded sample of ``count`` pairs without replacement."""
    n = len(dataset)
    if not 1 <= count <= n:
        raise ValueError(f"subset size must be in [1, {n}], got {count}")
    idx = np.random.default_rng(seed).permutation(n)[:count]
    return Dataset(dataset.images[idx], dataset.labels[idx])


# -- feeding schemes ----------------------------------------------------------

@dataclass(frozen=True)
class Whole:
    def __str__(self):
        return "whole"


@dataclass(frozen=True)
class SeparateFolds:
    k: int = 6

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("fold count must be >= 1")

    def __str__(self):
        return f"folds:{self.k}"


@dataclass(frozen=True)
class SlidingFold:
    window: int
    stride: int = 100

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ValueError("sliding window and stride must be >= 1")

    def __str__(self):
        return f"sliding:{self.window},{self.stride}"


FeedMode = Union[Whole, SeparateFolds, SlidingFold]


def parse_feed(text: str) -> FeedMode:
    """Parse ``whole``, ``folds:k`` or ``sliding:w,s``."""
    name, _, args = text.strip().partition(":")
    try:
        values = [int(v) for v in args.split(",")] if args else []
        if name == "whole" and not values:
            return Whole()
        if name == "folds" and len(values) <= 1:
            return SeparateFolds(*values)
        if name == "sliding" and 1 <= len(values) <= 2:
            return SlidingFold(*values)
    except ValueError:
        pass
    raise ValueError(f"bad feeding mode {text!r}; expected whole, folds:k or sliding:w,s")


@dataclass(frozen=True)
class FoldFeeder:
    mode: FeedMode = Whole()
    cursor: int = 0

    def check(self, n: int) -> None:
        if isinstance(self.mode, SeparateFolds) and self.mode.k > n:
            raise ValueError(f"{self.mode.k} folds requested for {n} samples")
        if isinstance(self.mode, SlidingFold) and self.mode.window > n:
            raise ValueError(f"window {self.mode.window} exceeds {n} samples")


def fold_bounds(n: int, k: int) -> np.ndarray:
    """Start offsets of ``k`` contiguous folds over ``n`` samples (plus ``n``).

    Sizes differ by at most one; the larger folds come first.
    """
    sizes = np.full(k, n // k)
    sizes[: n % k] += 1
    return np.concatenate([[0], np.cumsum(sizes)])


def next_fold(feeder: FoldFeeder, dataset: Dataset) -> tuple[Batch, FoldFeeder]:
    n = len(dataset)
    feeder.check(n)
    mode = feeder.mode
    if isinstance(mode, Whole):
        return dataset.as_batch(), feeder
    if isinstance(mode, SeparateFolds):
        fold = feeder.cursor % mode.k
        bounds = fold_bounds(n, mode.k)
        batch = dataset.take(slice(bounds[fold], bounds[fold + 1]))
        return batch, replace(feeder, cursor=(fold + 1) % mode.k)
    if isinstance(mode, SlidingFold):
        start = feeder.cursor % n
        idx = (start + np.arange(mode.window)) % n
        if start + mode.window <= n:
            idx = slice(start, start + mode.window)
        return dataset.take(idx), replace(feeder, cursor=(start + mode.stride) % n)
    raise TypeError(f"unknown feeding mode {mode!r}")


def load_split(images_path, labels_path, count=None, seed=0) -> Dataset:
    data = load_idx(Path(images_path), Path(labels_path))
    if count is not None:
        data = subset(data, count, seed)
    return data
