"""Dataset ingestion: a synthetic desk-scale task plus IDX and CIFAR-binary
file loaders, and seeded train-time augmentation.

File formats (bit-exact):

IDX (big-endian):
  images: magic 0x00000803, then uint32 count, rows, cols, then
          count*rows*cols unsigned bytes, row-major.
  labels: magic 0x00000801, then uint32 count, then count unsigned bytes.

CIFAR binary: a file is a sequence of 3073-byte records; each record is one
label byte followed by 3072 pixel bytes (1024 red, 1024 green, 1024 blue,
each a 32x32 row-major plane).

Pixels are scaled by 1/255 on load, so every loader yields values in [0,1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073


class BadMagicError(ValueError):
    """File does not start with the expected format magic."""


class TruncatedFileError(ValueError):
    """File is shorter than its header (or record structure) promises."""


class CountMismatchError(ValueError):
    """Paired files disagree on the number of items."""


@dataclass
class Dataset:
    """Immutable after construction; safe to share across readers."""

    images: np.ndarray  # float32 [N,C,H,W] or [N,D], values in [0,1]
    labels: np.ndarray  # int64 [N]
    class_count: int
    split: str

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(
                f"labels outside [0,{self.class_count}): "
                f"{self.labels.min()}..{self.labels.max()}")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0,1]: min {lo}, max {hi}")

    def __len__(self):
        return len(self.images)


def _split_per_class(images, labels, classes, train_fraction=0.8):
    train_idx, eval_idx = [], []
    for c in range(classes):
        idx = np.flatnonzero(labels == c)
        cut = int(len(idx) * train_fraction)
        train_idx.append(idx[:cut])
        eval_idx.append(idx[cut:])
    train_idx = np.concatenate(train_idx)
    eval_idx = np.concatenate(eval_idx)
    return ((images[train_idx], labels[train_idx]),
            (images[eval_idx], labels[eval_idx]))


def synth_blobs(n_per_class: int, classes: int, input_dim: int | None = None,
                image_shape: tuple | None = None, noise_sigma: float = 0.1,
                seed: int = 0):
    """Deterministic synthetic task, split 80/20 per class.

    input_dim: Gaussian clusters around seeded centers inside [0,1]^D.
    image_shape (C,H,W): class-conditional sinusoidal gratings (per-class
    orientation and frequency, per-sample random phase) plus Gaussian noise;
    pixel-space blobs would be linearly separable and hide regime differences.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be nonnegative, got {noise_sigma}")
    if (input_dim is None) == (image_shape is None):
        raise ValueError("pass exactly one of input_dim or image_shape")
    rng = np.random.default_rng(seed)
    n_total = n_per_class * classes
    labels = np.repeat(np.arange(classes), n_per_class)

    if input_dim is not None:
        centers = rng.uniform(0.25, 0.75, size=(classes, input_dim))
        noise = rng.normal(0.0, 1.0, size=(n_total, input_dim))
        images = np.clip(centers[labels] + noise_sigma * noise, 0.0, 1.0)
    else:
        c, h, w = image_shape
        # per-class grating: orientation spread over a half turn, frequency
        # jittered so no two classes share a spatial period
        angles = np.pi * (np.arange(classes) / classes) + rng.uniform(0, 0.2, classes)
        freqs = rng.uniform(1.5, 3.5, size=classes)
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        phases = rng.uniform(0.0, 2.0 * np.pi, size=n_total)
        noise = rng.normal(0.0, 1.0, size=(n_total, c, h, w))
        images = np.empty((n_total, c, h, w), dtype=np.float64)
        for i in range(n_total):
            k = labels[i]
            wave = np.sin(
                2.0 * np.pi * freqs[k] * (np.cos(angles[k]) * xs + np.sin(angles[k]) * ys) / h
                + phases[i])
            images[i] = 0.5 + 0.35 * wave + noise_sigma * noise[i]
        images = np.clip(images, 0.0, 1.0)

    (tr_x, tr_y), (ev_x, ev_y) = _split_per_class(images, labels, classes)
    return (Dataset(tr_x, tr_y, classes, "train"),
            Dataset(ev_x, ev_y, classes, "eval"))


def _read_idx_header(raw: bytes, path, expected_magic: int, ndim: int):
    header_len = 4 * (1 + ndim)
    if len(raw) < header_len:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, header needs {header_len}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise BadMagicError(
            f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    return dims, raw[header_len:]


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair into a [N,1,H,W] dataset."""
    with open(images_path, "rb") as fh:
        raw = fh.read()
    (count, rows, cols), payload = _read_idx_header(
        raw, images_path, IDX_IMAGES_MAGIC, 3)
    expected = count * rows * cols
    if len(payload) != expected:
        raise TruncatedFileError(
            f"{images_path}: payload {len(payload)} bytes, expected {expected}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)

    with open(labels_path, "rb") as fh:
        raw = fh.read()
    (label_count,), payload = _read_idx_header(raw, labels_path, IDX_LABELS_MAGIC, 1)
    if len(payload) != label_count:
        raise TruncatedFileError(
            f"{labels_path}: payload {len(payload)} bytes, expected {label_count}")
    if label_count != count:
        raise CountMismatchError(
            f"{images_path} has {count} images but {labels_path} has {label_count} labels")
    labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)

    class_count = int(labels.max()) + 1 if count else 0
    return Dataset(images.astype(np.float32) / 255.0, labels, class_count, "train")


def load_cifar_binary(paths, class_count: int = 10, split: str = "train") -> Dataset:
    """Parse one or more CIFAR-10 binary batch files, concatenated in order."""
    if isinstance(paths, (str, bytes)) or not hasattr(paths, "__iter__"):
        paths = [paths]
    chunks = []
    for path in paths:
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise TruncatedFileError(
                f"{path}: {len(raw)} bytes is not a positive multiple of "
                f"{CIFAR_RECORD_BYTES}-byte records")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES))
    records = np.concatenate(chunks)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, class_count, split)


@dataclass
class AugmentPolicy:
    flip_p: float = 0.5
    pad_crop: bool = True


def augment(batch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Seeded horizontal flip + reflect-pad-4 random crop; train split only."""
    if batch.ndim != 4:
        raise ValueError(f"augmentation needs [N,C,H,W] images, got shape {batch.shape}")
    n, _, h, w = batch.shape
    out = batch
    if policy.flip_p > 0:
        flips = rng.random(n) < policy.flip_p
        out = out.copy()
        out[flips] = out[flips, :, :, ::-1]
    if policy.pad_crop:
        pad = 4
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
        out = np.empty_like(batch)
        for i in range(n):
            dy, dx = offsets[i]
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out
