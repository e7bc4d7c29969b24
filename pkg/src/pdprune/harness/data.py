"""Dataset ingestion: MNIST IDX files and a synthetic Gaussian-cluster task."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from ..errors import FormatError, InputError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MNIST_DIR_ENV = "PDP_MNIST_DIR"


@dataclass
class Dataset:
    x: np.ndarray          # (N, *sample_shape), float
    y: np.ndarray          # (N,), int64
    n_classes: int

    def __len__(self) -> int:
        return len(self.y)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def subset(self, n: Optional[int]) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.x[:n], self.y[:n], self.n_classes)

    def shuffled(self, seed: int) -> "Dataset":
        idx = np.random.default_rng(seed).permutation(len(self))
        return Dataset(self.x[idx], self.y[idx], self.n_classes)

    def batches(self, batch_size: int, rng: np.random.Generator) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Shuffled mini-batches; the order depends only on ``rng``'s state."""
        idx = rng.permutation(len(self))
        for i in range(0, len(idx), batch_size):
            sel = idx[i:i + batch_size]
            yield self.x[sel], self.y[sel]


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Read an unsigned-byte IDX file, validating magic and payload length."""
    try:
        with _open(path) as fh:
            raw = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise FormatError(f"{path}: expected {count} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist(images_path, labels_path, dtype=np.float64) -> Dataset:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise FormatError("MNIST labels must lie in 0..9")
    x = (images.astype(dtype) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), 10)


def mnist_dir(path=None) -> Path:
    return Path(path or os.environ.get(MNIST_DIR_ENV, "data/mnist"))


def find_mnist_file(directory: Path, name: str) -> Path:
    for cand in (directory / name, directory / (name + ".gz"),
                 directory / name.replace("-idx", ".idx")):
        if cand.exists():
            return cand
    raise FormatError(f"missing MNIST file {name} under {directory}")


def load_mnist_split(split: str, directory=None, dtype=np.float64) -> Dataset:
    d = mnist_dir(directory)
    img, lab = MNIST_FILES[split]
    return load_mnist(find_mnist_file(d, img), find_mnist_file(d, lab), dtype)


def synthetic_task(seed: int, n_samples: int, n_features: int, n_classes: int,
                   separation: float = 4.0, noise: float = 1.0, image_shape=None,
                   dtype=np.float64) -> Dataset:
    """Gaussian clusters around orthogonal class means, clipped to be separable.

    Means sit at distance ``separation`` from the origin along orthonormal
    directions (random directions if classes outnumber features). Each
    sample's noise vector is clipped to a radius just under half the
    smallest inter-mean distance, so nearest-mean (a linear rule) classifies
    every sample correctly.
    """
    if min(n_samples, n_features, n_classes) <= 0:
        raise InputError("sizes must be positive")
    rng = np.random.default_rng(seed)
    if n_classes <= n_features:
        q, _ = np.linalg.qr(rng.standard_normal((n_features, n_classes)))
        means = q.T * separation
    else:
        means = rng.standard_normal((n_classes, n_features))
        means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    if n_classes > 1:
        d = np.linalg.norm(means[:, None] - means[None], axis=2)
        radius = 0.5 * d[~np.eye(n_classes, dtype=bool)].min() * 0.999
    else:
        radius = np.inf
    y = rng.integers(0, n_classes, n_samples)
    eps = rng.standard_normal((n_samples, n_features)) * noise
    norms = np.linalg.norm(eps, axis=1, keepdims=True)
    eps *= np.minimum(1.0, radius / np.maximum(norms, 1e-300))
    x = (means[y] + eps).astype(dtype)
    if image_shape is not None:
        x = x.reshape((n_samples,) + tuple(image_shape))
    return Dataset(x, y.astype(np.int64), n_classes)


def synthetic_split(seed: int, n_train: int, n_test: int, n_features: int, n_classes: int,
                    **kwargs) -> Tuple[Dataset, Dataset]:
    """Train/test drawn from one generator call so both share the class means."""
    full = synthetic_task(seed, n_train + n_test, n_features, n_classes, **kwargs)
    return (Dataset(full.x[:n_train], full.y[:n_train], n_classes),
            Dataset(full.x[n_train:], full.y[n_train:], n_classes))
