"""MNIST IDX ingestion and dataset splitting."""

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray  # (1, 1, H, W), values in [0, 1]
    label: int


@dataclass
class Dataset:
    """Images ``(N, C, H, W)`` float32 in [0, 1] and integer labels ``(N,)``."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValidationError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return LabeledExample(self.images[i:i + 1], int(self.labels[i]))

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx])


@dataclass
class DatasetSplit:
    train: Dataset
    validation: Dataset
    test: Dataset
    seed: int


def _read_header(buf, what, magic, ndim):
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise ParseError(f"{what}: truncated header, need {need} bytes, file has {len(buf)}", offset=len(buf))
    got = struct.unpack_from(">I", buf, 0)[0]
    if got != magic:
        raise ParseError(f"{what}: bad magic number, expected {magic}, got {got}", offset=0)
    return struct.unpack_from(f">{ndim}I", buf, 4), need


def parse_idx_images(buf, what="images"):
    (count, rows, cols), off = _read_header(buf, what, IMAGE_MAGIC, 3)
    need = off + count * rows * cols
    if len(buf) < need:
        raise ParseError(
            f"{what}: truncated pixel data, header promises {count}x{rows}x{cols} bytes", offset=len(buf)
        )
    pixels = np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=off)
    return pixels.reshape(count, 1, rows, cols)


def parse_idx_labels(buf, what="labels"):
    (count,), off = _read_header(buf, what, LABEL_MAGIC, 1)
    if len(buf) < off + count:
        raise ParseError(f"{what}: truncated label data, header promises {count} labels", offset=len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=off)


def load_mnist_idx(images_path, labels_path, num_classes=10):
    """Load an IDX image/label pair. Pixels are scaled to [0, 1] by 1/255."""
    with open(images_path, "rb") as f:
        img_buf = f.read()
    with open(labels_path, "rb") as f:
        lab_buf = f.read()
    pixels = parse_idx_images(img_buf, os.path.basename(images_path))
    labels = parse_idx_labels(lab_buf, os.path.basename(labels_path))
    if len(pixels) != len(labels):
        raise ParseError(f"image count {len(pixels)} does not match label count {len(labels)}", offset=4)
    if len(labels) and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise ParseError(f"label {labels[bad]} outside 0..{num_classes - 1}", offset=8 + bad)
    return Dataset((pixels.astype(np.float32) / np.float32(255.0)), labels.astype(np.int64))


def _find(data_dir, name):
    # accept both "train-images-idx3-ubyte" and "train-images.idx3-ubyte"
    for candidate in (name, name.replace("-idx", ".idx")):
        path = os.path.join(data_dir, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"{name} not found in {data_dir}")


def load_mnist(data_dir, split="train"):
    images, labels = MNIST_FILES[split]
    return load_mnist_idx(_find(data_dir, images), _find(data_dir, labels))


def split_train_validation(train, validation_size=5000, seed=0):
    """Seeded shuffle of ``train``; the last ``validation_size`` examples become validation."""
    if not 0 <= validation_size < len(train):
        raise ValidationError(f"validation size {validation_size} must be in [0, {len(train)})")
    order = np.random.default_rng(seed).permutation(len(train))
    cut = len(train) - validation_size
    return train.subset(np.sort(order[:cut])), train.subset(np.sort(order[cut:]))


def load_mnist_split(data_dir, validation_size=5000, seed=0):
    train, val = split_train_validation(load_mnist(data_dir, "train"), validation_size, seed)
    return DatasetSplit(train, val, load_mnist(data_dir, "test"), seed)
