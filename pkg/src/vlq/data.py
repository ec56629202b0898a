"""MNIST (IDX) and CIFAR-10 (binary records) readers.

Images are kept as uint8 and normalized per batch, which keeps the 60k-image
MNIST training split around 47 MB in memory.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptDataset, InvalidArgument

DATA_ROOT_ENV = "VLQ_DATA_ROOT"
DEFAULT_ROOT = "/root/data"

NORMALIZATION = {
    "mnist": ((0.1307,), (0.3081,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
}

_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
_CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
_CIFAR_RECORD = 1 + 3 * 32 * 32


def data_root(root=None) -> Path:
    return Path(root or os.environ.get(DATA_ROOT_ENV) or DEFAULT_ROOT)


@dataclass
class ArrayDataset:
    images: np.ndarray  # uint8, (N, C, H, W)
    labels: np.ndarray  # int64, (N,)
    mean: tuple
    std: tuple
    augment: bool = False

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def get(self, idx, rng: np.random.Generator | None = None):
        """Normalized float64 batch; pad-4 crop and horizontal flip when augmenting."""
        x = self.images[idx].astype(np.float64) / 255.0
        if self.augment and rng is not None:
            x = _augment(x, rng)
        mean = np.asarray(self.mean).reshape(1, -1, 1, 1)
        std = np.asarray(self.std).reshape(1, -1, 1, 1)
        return (x - mean) / std, self.labels[idx]

    def subset(self, count: int) -> "ArrayDataset":
        return ArrayDataset(self.images[:count], self.labels[:count], self.mean, self.std, self.augment)


def _augment(x, rng):
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)))
    dy = rng.integers(0, 9, size=n)
    dx = rng.integers(0, 9, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for k in range(n):
        crop = padded[k, :, dy[k] : dy[k] + h, dx[k] : dx[k] + w]
        out[k] = crop[:, :, ::-1] if flip[k] else crop
    return out


def _open(path: Path):
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise FileNotFoundError(f"dataset file not found: {path}")


def read_idx(path: Path, magic: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 8:
        raise CorruptDataset(f"{path.name}: file too short")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise CorruptDataset(f"{path.name}: magic number {got} != {magic}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise CorruptDataset(f"{path.name}: expected {int(np.prod(dims))} bytes of data, found {body.size}")
    return body.reshape(dims)


def load_mnist(split: str = "train", root=None) -> ArrayDataset:
    if split not in _MNIST_FILES:
        raise InvalidArgument(f"unknown split {split!r}")
    base = data_root(root) / "mnist"
    img_name, lbl_name = _MNIST_FILES[split]
    images = read_idx(base / img_name, 2051)
    labels = read_idx(base / lbl_name, 2049)
    if len(images) != len(labels):
        raise CorruptDataset("image and label counts differ")
    mean, std = NORMALIZATION["mnist"]
    return ArrayDataset(images[:, None, :, :], labels.astype(np.int64), mean, std)


def load_cifar10(split: str = "train", root=None, augment: bool | None = None) -> ArrayDataset:
    if split not in _CIFAR_FILES:
        raise InvalidArgument(f"unknown split {split!r}")
    base = data_root(root) / "cifar10"
    chunks = []
    for name in _CIFAR_FILES[split]:
        with _open(base / name) as f:
            raw = f.read()
        if len(raw) % _CIFAR_RECORD:
            raise CorruptDataset(f"{name}: size {len(raw)} is not a multiple of {_CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD))
    rec = np.concatenate(chunks)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise CorruptDataset("CIFAR-10 label out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    mean, std = NORMALIZATION["cifar10"]
    return ArrayDataset(images, labels, mean, std, augment=(split == "train") if augment is None else augment)


def load_dataset(name: str, split: str = "train", root=None, augment: bool | None = None) -> ArrayDataset:
    if name == "mnist":
        ds = load_mnist(split, root)
        if augment:
            ds.augment = True
        return ds
    if name == "cifar10":
        return load_cifar10(split, root, augment)
    raise InvalidArgument(f"unknown dataset {name!r}")
