"""Dataset ingestion: CIFAR-100 binary files and a synthetic grating corpus.

CIFAR-100 is read in its standard binary layout: records of exactly 3074
bytes (coarse label, fine label, then 3072 pixel bytes as full R, G, B
32x32 planes, row-major). Pixels are scaled to [0, 1]; per-channel
standardization is optional.

The synthetic corpus needs no downloads: each class is an oriented grating
(class-dependent angle and frequency) plus Gaussian noise, with exact label
balance, so the full test suite runs offline.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .tensor_core import Rng

__all__ = ["ImageDataset", "SyntheticSpec", "DataError", "load_cifar100",
           "gen_synthetic", "augment_batch", "RECORD_BYTES", "TRAIN_RECORDS",
           "TEST_RECORDS"]

RECORD_BYTES = 3074  # 1 coarse + 1 fine label byte + 3072 pixel bytes
TRAIN_RECORDS = 50_000
TEST_RECORDS = 10_000


class DataError(ValueError):
    """Raised on malformed or missing dataset files."""


@dataclass
class ImageDataset:
    images: np.ndarray  # [N, 3, H, W] float32
    labels: np.ndarray  # [N] int64

    def __len__(self):
        return len(self.labels)


def _read_records(path: str, n_records: int) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")
    expected = n_records * RECORD_BYTES
    actual = os.path.getsize(path)
    if actual != expected:
        raise DataError(
            f"{path}: expected {expected:,} bytes, got {actual:,}")
    raw = np.fromfile(path, dtype=np.uint8)
    return raw.reshape(n_records, RECORD_BYTES)


def _decode(records: np.ndarray, label_kind: str) -> ImageDataset:
    col = 0 if label_kind == "coarse" else 1
    labels = records[:, col].astype(np.int64)
    pixels = records[:, 2:].reshape(-1, 3, 32, 32)
    images = pixels.astype(np.float32) / 255.0
    return ImageDataset(images, labels)


def load_cifar100(directory: str, standardize: bool = False,
                  label_kind: str = "fine"):
    """Load train.bin / test.bin from ``directory``.

    Returns (train, test) ImageDatasets with pixels in [0, 1]; with
    ``standardize`` each channel is shifted/scaled by the train-split
    statistics instead.
    """
    if label_kind not in ("fine", "coarse"):
        raise ValueError(f"label_kind must be fine|coarse, got {label_kind!r}")
    train = _decode(_read_records(os.path.join(directory, "train.bin"),
                                  TRAIN_RECORDS), label_kind)
    test = _decode(_read_records(os.path.join(directory, "test.bin"),
                                 TEST_RECORDS), label_kind)
    if standardize:
        mean = train.images.mean(axis=(0, 2, 3), keepdims=True)
        std = train.images.std(axis=(0, 2, 3), keepdims=True) + 1e-8
        train.images = (train.images - mean) / std
        test.images = (test.images - mean) / std
    return train, test


@dataclass
class SyntheticSpec:
    classes: int = 4
    n_train: int = 512
    n_val: int = 128
    image_size: int = 32
    noise: float = 0.08

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.n_train < 1 or self.n_val < 0:
            raise ValueError("n_train must be >= 1, n_val >= 0")


def _balanced_labels(n: int, classes: int) -> np.ndarray:
    # n // classes per class; the first n % classes classes get one extra
    base = np.repeat(np.arange(classes, dtype=np.int64), n // classes)
    extra = np.arange(n % classes, dtype=np.int64)
    return np.concatenate([base, extra])

def _grating_batch(labels: np.ndarray, spec: SyntheticSpec,
                   rng: Rng) -> np.ndarray:
    s = spec.image_size
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    angles = np.pi * labels / spec.classes
    freq = 2.0 + labels
    phase = rng.uniform(len(labels), 0.0, 2.0 * np.pi)
    coord = (xx[None] * np.cos(angles)[:, None, None]
             + yy[None] * np.sin(angles)[:, None, None])
    pattern = np.sin(2.0 * np.pi * freq[:, None, None] * coord / s
                     + phase[:, None, None])
    # class-dependent channel contrast: a rotating color signature
    base = np.array([1.0, 0.7, 0.4])
    amp = np.stack([np.roll(base, c) for c in range(spec.classes)])[labels]
    img = 0.5 + 0.35 * amp[:, :, None, None] * pattern[:, None, :, :]
    img += rng.normal(img.shape, 0.0, spec.noise)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment_batch(images: np.ndarray, rng: Rng, pad: int = 4) -> np.ndarray:
    """Random pad-and-crop plus horizontal flip, one draw set per image.

    Standard light augmentation for the CIFAR path; deterministic per rng
    stream. Returns a new array, the input is untouched.
    """
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ys = rng.integers(0, 2 * pad + 1, n)
    xs = rng.integers(0, 2 * pad + 1, n)
    flips = rng.integers(0, 2, n)
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, ys[i]:ys[i] + h, xs[i]:xs[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def gen_synthetic(spec: SyntheticSpec, seed: int):
    """Deterministic (spec, seed) -> (train, val) grating datasets."""
    rng = Rng(seed)
    train_rng, val_rng, order_rng = rng.split(), rng.split(), rng.split()
    datasets = []
    for n, stream in ((spec.n_train, train_rng), (spec.n_val, val_rng)):
        labels = _balanced_labels(n, spec.classes)
        images = _grating_batch(labels, spec, stream)
        order = order_rng.permutation(n)
        datasets.append(ImageDataset(images[order], labels[order]))
    return tuple(datasets)
