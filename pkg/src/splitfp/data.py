"""Datasets: MNIST IDX ingestion, synthetic Gaussian blobs, seeded batching."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

DATA_DIR_ENV = "SPLITFP_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 3:
            raise ValueError(f"images must be (N, H, W), got {self.images.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.class_count)

    def inputs(self, input_shape) -> np.ndarray:
        """Images reshaped to ``(N,) + input_shape`` for a model."""
        return self.images.reshape((len(self),) + tuple(input_shape))


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: truncated file (no header)")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated file (header)")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFileError(f"{path}: truncated file, expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise CountMismatchError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    return Dataset(images.astype(np.float32) / np.float32(255), labels.astype(np.int64), class_count)


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write ``ds`` as IDX files; pixels are quantised back to bytes."""
    n, h, w = ds.images.shape
    pix = np.rint(np.clip(ds.images, 0, 1) * 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, h, w) + pix.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, Path.home() / "data" / "mnist"))


def load_mnist(directory=None, split: str = "train") -> Dataset:
    directory = Path(directory) if directory is not None else default_data_dir()
    img, lab = MNIST_FILES[split]
    return load_idx(directory / img, directory / lab)


def synth_dataset(n_per_class: int, class_count: int, dim: int, seed: int,
                  sigma: float = 0.05) -> Dataset:
    """Gaussian class blobs laid out as ``(N, 1, dim)`` images.

    Class means are drawn from {0.2, 0.8}^dim, rejecting any mean closer than
    6*sigma (L2) to an earlier one, so the classes stay separable after
    clipping to [0, 1].
    """
    for name, v in (("n_per_class", n_per_class), ("class_count", class_count), ("dim", dim)):
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = np.random.default_rng(seed)
    means = []
    for _ in range(10_000):
        if len(means) == class_count:
            break
        m = np.where(rng.random(dim) < 0.5, 0.2, 0.8)
        if all(np.linalg.norm(m - o) >= 6 * sigma for o in means):
            means.append(m)
    else:
        raise ValueError(f"cannot place {class_count} separated means in {dim} dims")
    means = np.array(means)
    labels = np.repeat(np.arange(class_count), n_per_class)
    x = means[labels] + sigma * rng.standard_normal((len(labels), dim))
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    return Dataset(x.reshape(len(labels), 1, dim), labels.astype(np.int64), class_count)


def synth_splits(n_train: int, n_test: int, class_count: int, dim: int, seed: int,
                 sigma: float = 0.05) -> tuple[Dataset, Dataset]:
    """Train/test blobs sharing the same class means (first rows of each class train)."""
    full = synth_dataset(n_train + n_test, class_count, dim, seed, sigma)
    pos = np.arange(len(full)) % (n_train + n_test)
    return full.subset(np.flatnonzero(pos < n_train)), full.subset(np.flatnonzero(pos >= n_train))


def class_means(ds: Dataset) -> np.ndarray:
    flat = ds.images.reshape(len(ds), -1)
    return np.stack([flat[ds.labels == c].mean(axis=0) for c in range(ds.class_count)])


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    order: np.ndarray
    seed: int

    @classmethod
    def shuffled(cls, n: int, batch_size: int, seed: int) -> "BatchPlan":
        if batch_size <= 0:
            raise ValueError("batch_size must be positive")
        order = np.random.default_rng(seed).permutation(n)
        return cls(batch_size, order, seed)

    @classmethod
    def for_epoch(cls, n: int, batch_size: int, seed: int, epoch: int) -> "BatchPlan":
        # reseeded per epoch so any epoch can be regenerated on its own
        return cls.shuffled(n, batch_size, seed + epoch)

    def index_batches(self):
        for i in range(0, len(self.order), self.batch_size):
            yield self.order[i:i + self.batch_size]


def batches(ds: Dataset, plan: BatchPlan, input_shape=None):
    """Yield ``(x_batch, y_batch)``; the last batch may be short."""
    if len(plan.order) != len(ds):
        raise ValueError(f"plan covers {len(plan.order)} samples, dataset has {len(ds)}")
    shape = tuple(input_shape) if input_shape is not None else ds.image_shape
    for idx in plan.index_batches():
        yield ds.images[idx].reshape((len(idx),) + shape), ds.labels[idx]
