"""Dataset ingestion and deterministic mini-batching.

CIFAR binary batches are fixed-size records: label byte(s) followed by 3072
pixel bytes, channel-planar R, G, B, each plane row-major 32x32. Images are
normalized per channel with statistics taken from the train split only.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import IngestionError

CIFAR_SHAPE = (3, 32, 32)
CIFAR_PIXELS = 3 * 32 * 32
CIFAR10_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST = ("test_batch.bin",)
CIFAR100_TRAIN = ("train.bin",)
CIFAR100_TEST = ("test.bin",)


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray   # (C,)

    @classmethod
    def of(cls, images):
        x = np.asarray(images, dtype=np.float64)
        std = x.std(axis=(0, 2, 3))
        return cls(x.mean(axis=(0, 2, 3)), np.where(std > 0, std, 1.0))

    def apply(self, images):
        x = (np.asarray(images, dtype=np.float64) - self.mean[:, None, None]) / self.std[:, None, None]
        return np.ascontiguousarray(x, dtype=np.float32)


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32, normalized
    labels: np.ndarray  # (N,) int64
    num_classes: int
    stats: ChannelStats | None = None

    def __len__(self):
        return len(self.labels)

    @property
    def geometry(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.stats)


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


# ---------------------------------------------------------------- CIFAR


def read_cifar_file(path, label_bytes=1, label_index=0, num_classes=10):
    """Raw ``(uint8 images (N,3,32,32), int64 labels)`` from one binary batch file."""
    record = label_bytes + CIFAR_PIXELS
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except FileNotFoundError:
        raise IngestionError(f"{path}: missing file", path=path, offset=0) from None
    if raw.size == 0:
        raise IngestionError(f"{path}: empty file", path=path, offset=0)
    if raw.size % record:
        offset = raw.size - raw.size % record
        raise IngestionError(
            f"{path}: truncated record at byte offset {offset} ({raw.size % record} of {record} bytes)",
            path=path, offset=offset)
    recs = raw.reshape(-1, record)
    labels = recs[:, label_index].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        offset = int(bad[0]) * record + label_index
        raise IngestionError(f"{path}: label {labels[bad[0]]} out of range at byte offset {offset}",
                             path=path, offset=offset)
    return recs[:, label_bytes:].reshape(-1, *CIFAR_SHAPE), labels


def write_cifar_file(path, images, labels, coarse_labels=None):
    """Write records in the CIFAR binary layout (two label bytes when ``coarse_labels`` is given)."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), CIFAR_PIXELS)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if coarse_labels is not None:
        cols.insert(0, np.asarray(coarse_labels, dtype=np.uint8)[:, None])
    np.concatenate([*cols, images], axis=1).tofile(path)


def _resolve(root, names, subdir):
    if not all(os.path.exists(os.path.join(root, n)) for n in names):
        nested = os.path.join(root, subdir)
        if os.path.isdir(nested):
            return nested
    return root


def _load_split_pair(root, train_names, test_names, label_bytes, label_index, num_classes, subdir):
    root = _resolve(os.fspath(root), train_names + test_names, subdir)

    def read(names):
        parts = [read_cifar_file(os.path.join(root, n), label_bytes, label_index, num_classes) for n in names]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    (xtr, ytr), (xte, yte) = read(train_names), read(test_names)
    stats = ChannelStats.of(xtr)
    return (Dataset(stats.apply(xtr), ytr, num_classes, stats),
            Dataset(stats.apply(xte), yte, num_classes, stats))


def load_cifar10(root):
    """``(train, test)`` from the standard CIFAR-10 binary batches under ``root``."""
    return _load_split_pair(root, CIFAR10_TRAIN, CIFAR10_TEST, 1, 0, 10, "cifar-10-batches-bin")


def load_cifar100(root):
    """``(train, test)`` for CIFAR-100; records carry coarse then fine label, the fine one is used."""
    return _load_split_pair(root, CIFAR100_TRAIN, CIFAR100_TEST, 2, 1, 100, "cifar-100-binary")


# ---------------------------------------------------------------- synthetic


def _blob_means(gen, classes, geometry, blobs, amplitude):
    c, h, w = geometry
    yy, xx = np.mgrid[0:h, 0:w]
    means = np.zeros((classes, c, h, w))
    for k in range(classes):
        for _ in range(blobs):
            ch = gen.integers(c)
            cy, cx = gen.uniform(0, h), gen.uniform(0, w)
            width = gen.uniform(0.1, 0.3) * min(h, w)
            sign = gen.choice((-1.0, 1.0))
            means[k, ch] += sign * amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    return means


def synth_patches(seed, n, classes, geometry=(3, 16, 16), noise=1.0, margin=1.0, blobs=4, amplitude=1.5):
    """Class-conditional Gaussian-blob images.

    Each class has a fixed mean image made of a few random Gaussian bumps;
    samples add i.i.d. pixel noise. A sample is kept only if the
    nearest-mean linear rule classifies it correctly by at least ``margin``,
    so the data is linearly separable by construction. Labels cycle through
    the classes, so every class appears ``n // classes`` or one more times.
    Images are returned unnormalized; see :func:`normalize_split`.
    """
    if classes < 1 or n < classes:
        raise ValueError(f"need n >= classes >= 1, got n={n}, classes={classes}")
    gen = np.random.Generator(np.random.PCG64([seed, 0x5EED]))
    means = _blob_means(gen, classes, geometry, blobs, amplitude)
    flat = means.reshape(classes, -1)
    bias = -0.5 * (flat * flat).sum(axis=1)
    labels = np.arange(n, dtype=np.int64) % classes
    images = np.empty((n, *geometry))
    todo = np.arange(n)
    while todo.size:
        x = means[labels[todo]] + noise * gen.standard_normal((todo.size, *geometry))
        if classes > 1:
            scores = x.reshape(todo.size, -1) @ flat.T + bias
            own = scores[np.arange(todo.size), labels[todo]]
            scores[np.arange(todo.size), labels[todo]] = -np.inf
            ok = own - scores.max(axis=1) >= margin
        else:
            ok = np.ones(todo.size, dtype=bool)
        images[todo[ok]] = x[ok]
        todo = todo[~ok]
    return Dataset(images.astype(np.float32), labels, classes)


def normalize_split(dataset, n_test):
    """Hold out the last ``n_test`` samples, then normalize both parts with train statistics."""
    if not 0 < n_test < len(dataset):
        raise ValueError(f"n_test must be in (0, {len(dataset)}), got {n_test}")
    cut = len(dataset) - n_test
    stats = ChannelStats.of(dataset.images[:cut])
    return tuple(Dataset(stats.apply(dataset.images[part]), dataset.labels[part], dataset.num_classes, stats)
                 for part in (slice(0, cut), slice(cut, None)))


# ---------------------------------------------------------------- batching


def batches(dataset, batch_size, seed, epoch):
    """Shuffled mini-batches for one epoch; the last partial batch is dropped.

    The order depends only on ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    perm = np.random.Generator(np.random.PCG64([seed, epoch])).permutation(len(dataset))
    for start in range(0, len(perm) - batch_size + 1, batch_size):
        idx = perm[start:start + batch_size]
        yield LabeledBatch(dataset.images[idx], dataset.labels[idx], idx)
