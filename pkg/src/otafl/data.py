"""Datasets: MNIST IDX ingestion, synthetic tasks and equal partitioning."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as _rng
from .core_model import Sample

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Samples stored row-wise: ``X`` is (n, d) and ``y`` is (n,)."""

    X: np.ndarray
    y: np.ndarray
    name: str = "dataset"
    # row ids into the source dataset, kept through filtering/partitioning
    index: np.ndarray = field(default=None, repr=False)
    teacher: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if X.ndim != 2 or X.shape[0] == 0:
            raise DataError("dataset must be a non-empty 2-d array of samples")
        if y.shape != (X.shape[0],):
            raise DataError("one label per sample required")
        if not np.all(np.isfinite(X)):
            raise DataError("non-finite feature entry")
        idx = np.arange(X.shape[0]) if self.index is None else np.asarray(self.index)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "index", idx)

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.X[i], float(self.y[i]))

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return [self[i] for i in range(len(self))]

    def subset(self, rows, name: str | None = None) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return Dataset(self.X[rows], self.y[rows], name or self.name, self.index[rows], self.teacher)


# ---------------------------------------------------------------------------
# IDX files


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 8:
        raise DataError(f"{what} file truncated")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataError(f"{what} file has bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{what} file truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataError(f"{what} file truncated: {len(raw) - header} of {count} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _parse_idx(_read_bytes(path), IDX_IMAGES_MAGIC, "image")


def read_idx_labels(path) -> np.ndarray:
    return _parse_idx(_read_bytes(path), IDX_LABELS_MAGIC, "label")


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"count mismatch: {images.shape[0]} images, {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return Dataset(X, labels.astype(float), name=Path(images_path).name)


def make_binary_task(dataset: Dataset, class_a: int, class_b: int) -> Dataset:
    """Keep two classes, relabelled class_a -> +1 and class_b -> -1."""
    if class_a == class_b:
        raise DataError("the two classes must differ")
    is_a = dataset.y == class_a
    is_b = dataset.y == class_b
    for c, mask in ((class_a, is_a), (class_b, is_b)):
        if not mask.any():
            raise DataError(f"missing class {c}")
    rows = np.flatnonzero(is_a | is_b)
    y = np.where(is_a[rows], 1.0, -1.0)
    return Dataset(dataset.X[rows], y, f"{dataset.name}[{class_a}v{class_b}]", dataset.index[rows])


def add_bias(dataset: Dataset) -> Dataset:
    """Append a constant-1 feature so the last parameter acts as a bias."""
    X = np.hstack([dataset.X, np.ones((len(dataset), 1))])
    return Dataset(X, dataset.y, dataset.name, dataset.index, dataset.teacher)


def synth_dataset(n: int, d: int, seed: int) -> Dataset:
    """Standard-normal features labelled by a random teacher hyperplane.

    Ties (x . w == 0, a probability-zero event) are labelled +1.
    """
    if n < 1 or d < 1:
        raise DataError("need n >= 1 and d >= 1")
    g = _rng.stream(seed, _rng.SYNTH, n, d)
    teacher = g.standard_normal(d)
    X = g.standard_normal((n, d))
    y = np.where(X @ teacher >= 0, 1.0, -1.0)
    return Dataset(X, y, f"synth-n{n}-d{d}-s{seed}", teacher=teacher)


def split_train_test(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise DataError("test fraction must be in (0, 1)")
    perm = _rng.stream(seed, _rng.PARTITION, 1).permutation(len(dataset))
    n_test = max(1, int(round(test_fraction * len(dataset))))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


@dataclass(frozen=True)
class Partition:
    shards: list[Dataset]

    def __len__(self):
        return len(self.shards)

    def __iter__(self):
        return iter(self.shards)

    def __getitem__(self, i):
        return self.shards[i]


def partition_equal(dataset: Dataset, n_devices: int, seed: int) -> Partition:
    """Seeded shuffle followed by a round-robin split into ``n_devices`` shards."""
    if n_devices < 1:
        raise DataError("need at least one device")
    if n_devices > len(dataset):
        raise DataError(f"{n_devices} devices but only {len(dataset)} samples")
    perm = _rng.stream(seed, _rng.PARTITION, 0, n_devices).permutation(len(dataset))
    shards = [dataset.subset(perm[i::n_devices], f"{dataset.name}/dev{i}") for i in range(n_devices)]
    return Partition(shards)


# ---------------------------------------------------------------------------
# CSV export: header label,f0,f1,...


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j}" for j in range(dataset.dim)])
        for x, y in zip(dataset.X, dataset.y):
            w.writerow([repr(float(y))] + [repr(float(v)) for v in x])


def load_csv(path, name: str | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["label"]:
        raise DataError("CSV must start with a 'label,f0,...' header")
    body = np.array(rows[1:], dtype=float)
    if body.size == 0:
        raise DataError("CSV has no samples")
    return Dataset(body[:, 1:], body[:, 0], name or Path(path).stem)
