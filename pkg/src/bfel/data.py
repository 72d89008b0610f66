"""Datasets: CSV schema, MNIST IDX import, synthetic blobs, splits and batching.

CSV schema: a header line ``dim,num_classes,count`` followed by ``count`` rows,
each holding ``dim`` feature values then an integer label.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, InputError


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2:
            raise InputError("features must be a 2-D array (samples x dim)")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise InputError("labels must be 1-D with one label per sample")
        if x.shape[0] == 0:
            raise InputError("dataset must be non-empty")
        if not np.all(np.isfinite(x)):
            raise InputError("features must be finite")
        if y.dtype.kind not in "iu":
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise InputError("labels must be integers")
        y = y.astype(np.int64)
        if self.num_classes < 1 or y.min() < 0 or y.max() >= self.num_classes:
            raise InputError("labels must lie in [0, num_classes)")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.vstack([self.features, other.features]),
                       np.concatenate([self.labels, other.labels]),
                       max(self.num_classes, other.num_classes))


# -- file formats -----------------------------------------------------------

def save_csv(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{ds.dim},{ds.num_classes},{len(ds)}\n")
        for row, label in zip(ds.features, ds.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


def load_csv(path) -> Dataset:
    path = Path(path)
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            dim, num_classes, count = (int(h) for h in header)
            rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read dataset {path}: {exc}") from exc
    if rows.shape != (count, dim + 1):
        raise ConfigurationError(
            f"{path}: header promises {count} rows of {dim + 1} columns, found {rows.shape}")
    return Dataset(rows[:, :dim], rows[:, dim], num_classes)


def _open_maybe_gz(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (the MNIST distribution format), optionally gzipped."""
    path = Path(path)
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ConfigurationError(f"{path}: not an IDX file")
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    if raw[2] not in dtypes:
        raise ConfigurationError(f"{path}: unknown IDX element type {raw[2]:#x}")
    ndim = raw[3]
    shape = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=dtypes[raw[2]], offset=4 + 4 * ndim)
    if data.size != int(np.prod(shape)):
        raise ConfigurationError(f"{path}: payload size does not match header shape {shape}")
    return data.reshape(shape)


def write_idx(array: np.ndarray, path) -> None:
    codes = {np.dtype("uint8"): 0x08, np.dtype("int8"): 0x09, np.dtype("int16"): 0x0B,
             np.dtype("int32"): 0x0C, np.dtype("float32"): 0x0D, np.dtype("float64"): 0x0E}
    array = np.asarray(array)
    header = bytes([0, 0, codes[array.dtype], array.ndim])
    header += struct.pack(">" + "I" * array.ndim, *array.shape)
    body = array.astype(array.dtype.newbyteorder(">")).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + body)


def load_mnist(images_path, labels_path, limit: int | None = None) -> Dataset:
    """Pixels normalized to [0, 1], images flattened row-major."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ConfigurationError("MNIST image and label counts differ")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), 10)


def find_mnist(directory) -> tuple[Path, Path] | None:
    directory = Path(directory)
    for stem in ("train", "t10k"):
        for suffix in ("", ".gz"):
            img = directory / f"{stem}-images-idx3-ubyte{suffix}"
            lab = directory / f"{stem}-labels-idx1-ubyte{suffix}"
            if img.exists() and lab.exists():
                return img, lab
    return None


def make_blobs(n_samples: int, dim: int, num_classes: int, seed: int,
               separation: float = 3.0, noise: float = 1.0) -> Dataset:
    """Isotropic Gaussian clusters, one per class, with balanced class counts.

    Class centres are drawn from N(0, (separation^2/dim) I) so the expected
    centre distance does not depend on ``dim``.
    """
    if n_samples < num_classes:
        raise ConfigurationError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, separation / np.sqrt(dim), size=(num_classes, dim))
    labels = np.arange(n_samples) % num_classes
    rng.shuffle(labels)
    x = centers[labels] + rng.normal(0.0, noise, size=(n_samples, dim))
    return Dataset(x, labels, num_classes)


# -- splitting and batching ---------------------------------------------------

def train_test_split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < train_fraction < 1:
        raise ConfigurationError("train_fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(train_fraction * len(ds)))
    if cut == 0 or cut == len(ds):
        raise ConfigurationError("split leaves an empty side")
    return ds.subset(np.sort(order[:cut])), ds.subset(np.sort(order[cut:]))


def iid_shards(ds: Dataset, n_shards: int, seed: int) -> list[Dataset]:
    """Uniform random partition into near-equal shards."""
    if n_shards < 1 or n_shards > len(ds):
        raise ConfigurationError("shard count must be in [1, len(dataset)]")
    order = np.random.default_rng(seed).permutation(len(ds))
    return [ds.subset(np.sort(part)) for part in np.array_split(order, n_shards)]


def flip_labels(ds: Dataset) -> Dataset:
    """Cyclic label permutation y -> (y + 1) mod K."""
    return Dataset(ds.features, (ds.labels + 1) % ds.num_classes, ds.num_classes)


class BatchSampler:
    """Mini-batches drawn without replacement; reshuffled each epoch from a seeded stream.

    The trailing partial batch of an epoch is dropped so every batch has
    exactly ``batch_size`` samples.
    """

    def __init__(self, ds: Dataset, batch_size: int, seed: int):
        if not 1 <= batch_size <= len(ds):
            raise ConfigurationError(
                f"batch size {batch_size} must be in [1, {len(ds)}]")
        self.ds = ds
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self._queue: list[np.ndarray] = []

    @property
    def batches_per_epoch(self) -> int:
        return len(self.ds) // self.batch_size

    def _refill(self) -> None:
        order = self.rng.permutation(len(self.ds))
        b = self.batch_size
        self._queue = [order[i * b:(i + 1) * b] for i in range(self.batches_per_epoch)]
        self._queue.reverse()
        self.epoch += 1

    def next(self) -> Dataset:
        if not self._queue:
            self._refill()
        return self.ds.subset(self._queue.pop())

    def __iter__(self) -> Iterator[Dataset]:
        while True:
            yield self.next()
