"""MNIST loading from IDX files and deterministic mini-batch iteration."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from reduced_precision.quant import make_rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
NUM_CLASSES = 10

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class DimensionMismatchError(IdxError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(path, magic: int, ndim: int):
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is shorter than the {header}-byte header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    body = len(raw) - header
    if body < expected:
        raise TruncatedFileError(f"{path}: header promises {expected} bytes of data, file has {body}")
    if body > expected:
        raise DimensionMismatchError(f"{path}: {body - expected} trailing bytes beyond dimensions {dims}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx_images(path) -> np.ndarray:
    """Read an IDX3 image file into float32 ``(N, rows, cols)`` scaled to [0, 1]."""
    data = _parse_idx(path, IMAGES_MAGIC, 3)
    return data.astype(np.float32) / np.float32(255)


def load_idx_labels(path) -> np.ndarray:
    labels = _parse_idx(path, LABELS_MAGIC, 1).astype(np.int64)
    if labels.size and labels.max() >= NUM_CLASSES:
        raise IdxError(f"{path}: label {labels.max()} outside 0..9")
    return labels


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DimensionMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels in {self.split} split"
            )

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int | None) -> "Dataset":
        """First ``n`` samples (the whole set for ``None``)."""
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split)


def _find(data_dir: Path, name: str) -> Path:
    for candidate in (name, name + ".gz", name.replace("-idx", ".idx")):
        p = data_dir / candidate
        if p.exists():
            return p
    raise FileNotFoundError(f"no {name}[.gz] in {data_dir}")


def load_mnist(data_dir, split: str = "train") -> Dataset:
    data_dir = Path(os.path.expanduser(str(data_dir)))
    img_name, lbl_name = TRAIN_FILES if split == "train" else TEST_FILES
    images = load_idx_images(_find(data_dir, img_name))
    labels = load_idx_labels(_find(data_dir, lbl_name))
    return Dataset(images, labels, split)


def one_hot(labels, classes: int = NUM_CLASSES) -> np.ndarray:
    out = np.zeros((len(labels), classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1
    return out


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return make_rng(seed, 1, epoch).permutation(n)


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int, classes: int = NUM_CLASSES):
    """Yield ``(images, one_hot_targets)`` for one shuffled pass; last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(dataset), seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], one_hot(dataset.labels[idx], classes)
