"""Datasets: IDX ingestion, synthetic generators and the splits used for incremental runs."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ConsistencyError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Features ``X`` (n, ...) and integer labels ``y`` (n,)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.X) != len(self.y):
            raise ConsistencyError(f"{len(self.X)} feature rows but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx])


@dataclass
class ShardedDataset:
    """T disjoint shards D_1..D_T that arrive one after another."""

    shards: list
    split_seed: int
    split_spec: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.shards)

    def shard(self, t: int) -> Dataset:
        """Shard ``t`` (0-based)."""
        return self.shards[t]

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.shards]


# --------------------------------------------------------------------------- IDX


def _open(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatError(f"{path}: bad magic number 0x{got:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise ConsistencyError(f"{path}: header declares {count} bytes of data, file holds {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (plain or gzip); pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def save_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as uncompressed IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def mnist_subset() -> Dataset:
    """The bundled 5000-image MNIST subset (500 images per digit)."""
    root = resources.files("bayesil") / "datasets" / "mnist5k"
    with resources.as_file(root / "images-idx3-ubyte.gz") as img, resources.as_file(root / "labels-idx1-ubyte.gz") as lab:
        return load_idx(img, lab)


# --------------------------------------------------------------------------- synthetic


def blob_centers(classes: int, dim: int = 2) -> np.ndarray:
    """Class centres on a circle, neighbouring centres one unit apart."""
    if classes == 1:
        return np.zeros((1, dim))
    radius = 0.5 / np.sin(np.pi / classes)
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = np.zeros((classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def gen_synthetic(kind: str, n: int, classes: int, noise: float, seed: int, dim: int = 2) -> Dataset:
    """Deterministic toy classification data.

    ``blobs``: isotropic Gaussian clusters of std ``noise`` around
    :func:`blob_centers`.  ``moons``: the two interleaved half circles
    (``classes`` must be 2).  Class counts differ by at most one.
    """
    if n < classes:
        raise ConfigurationError(f"need n >= classes, got n={n}, classes={classes}")
    rng = np.random.default_rng(seed)
    counts = [n // classes + (i < n % classes) for i in range(classes)]
    y = np.repeat(np.arange(classes), counts)
    if kind == "blobs":
        if dim < 2:
            raise ConfigurationError("blobs need dim >= 2")
        X = blob_centers(classes, dim)[y] + noise * rng.standard_normal((n, dim))
    elif kind == "moons":
        if classes != 2:
            raise ConfigurationError("moons has exactly 2 classes")
        t = np.pi * rng.random(n)
        X = np.where(
            (y == 0)[:, None],
            np.stack([np.cos(t), np.sin(t)], 1),
            np.stack([1 - np.cos(t), 0.5 - np.sin(t)], 1),
        )
        X = X + noise * rng.standard_normal((n, 2))
    else:
        raise ConfigurationError(f"unknown synthetic kind {kind!r}; expected 'blobs' or 'moons'")
    perm = rng.permutation(n)
    return Dataset(X[perm], y[perm])


# --------------------------------------------------------------------------- splits


def train_test_split(dataset: Dataset, test_size: int | float, seed: int) -> tuple[Dataset, Dataset]:
    n = len(dataset)
    n_test = int(round(test_size * n)) if isinstance(test_size, float) else int(test_size)
    if not 0 < n_test < n:
        raise ConfigurationError(f"test size {n_test} out of range for {n} examples")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(perm[n_test:]), dataset.subset(perm[:n_test])


def split_shards(dataset: Dataset, T: int, seed: int) -> ShardedDataset:
    """Shuffle with ``seed`` and cut into T contiguous chunks whose sizes differ by at most one."""
    if not 1 <= T <= len(dataset):
        raise ConfigurationError(f"T must lie in [1, {len(dataset)}], got {T}")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    chunks = np.array_split(perm, T)
    return ShardedDataset([dataset.subset(c) for c in chunks], seed, {"kind": "iid_shards", "T": T})


@dataclass
class LabelSplit:
    part_a: Dataset
    part_b: Dataset
    classes_a: list
    classes_b: list
    seed: int

    def original_label(self, part: str, label):
        classes = self.classes_a if part == "a" else self.classes_b
        return np.asarray(classes)[label]


def label_split(dataset: Dataset, seed: int) -> LabelSplit:
    """Split by class into two halves; labels in each half are re-indexed to 0..K/2-1.

    Classes are shuffled with ``seed``; the first half goes to part A.  Within a
    part, new label ``i`` is the ``i``-th smallest original class of that part.
    """
    classes = np.unique(dataset.y)
    if len(classes) % 2:
        raise ConfigurationError(f"label_split needs an even number of classes, got {len(classes)}")
    shuffled = np.random.default_rng(seed).permutation(classes)
    half = len(classes) // 2
    a, b = sorted(shuffled[:half].tolist()), sorted(shuffled[half:].tolist())

    def part(keep):
        mask = np.isin(dataset.y, keep)
        remap = {c: i for i, c in enumerate(keep)}
        return Dataset(dataset.X[mask], np.array([remap[c] for c in dataset.y[mask]], dtype=np.int64))

    return LabelSplit(part(a), part(b), a, b, seed)
