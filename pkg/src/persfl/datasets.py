"""Labeled datasets: IDX ingestion, a seeded Gaussian generator, 60/20/20 splits."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError, SizeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise DataError(f"features {features.shape} and labels {labels.shape} disagree")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return self.features[idx], self.labels[idx]


@dataclass(frozen=True, eq=False)
class ClientData:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))

    @property
    def sizes(self):
        return len(self.train), len(self.val), len(self.test)

    def all_indices(self):
        return np.concatenate([self.train, self.val, self.test])

    def __eq__(self, other):
        return isinstance(other, ClientData) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("train", "val", "test"))

    def to_json(self):
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}

    @classmethod
    def from_json(cls, doc):
        return cls(doc["train"], doc["val"], doc["test"])


def _read_u32s(blob, offset, count, what):
    end = offset + 4 * count
    if len(blob) < end:
        raise FormatError(f"truncated {what} header: need {end} bytes, file has {len(blob)}",
                          offset=len(blob))
    return struct.unpack(f">{count}I", blob[offset:end])


def load_idx(images_path, labels_path, num_classes=None, normalize=True):
    """Read an IDX image/label file pair into a :class:`Dataset`.

    Pixels are scaled by 1/255 (when ``normalize``) and each H x W image is
    flattened row-major.
    """
    images = Path(images_path).read_bytes()
    labels = Path(labels_path).read_bytes()

    (magic,) = _read_u32s(images, 0, 1, "image")
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}",
                          offset=0)
    n_img, rows, cols = _read_u32s(images, 4, 3, "image")
    pixels = n_img * rows * cols
    if len(images) < 16 + pixels:
        raise FormatError(f"truncated image payload: need {16 + pixels} bytes, "
                          f"file has {len(images)}", offset=len(images))

    (magic,) = _read_u32s(labels, 0, 1, "label")
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}",
                          offset=0)
    (n_lab,) = _read_u32s(labels, 4, 1, "label")
    if len(labels) < 8 + n_lab:
        raise FormatError(f"truncated label payload: need {8 + n_lab} bytes, "
                          f"file has {len(labels)}", offset=len(labels))
    if n_lab != n_img:
        raise FormatError(f"count mismatch: {n_img} images but {n_lab} labels", offset=4)

    x = np.frombuffer(images, dtype=np.uint8, count=pixels, offset=16)
    x = x.reshape(n_img, rows * cols).astype(np.float64)
    if normalize:
        x = x / 255.0
    y = np.frombuffer(labels, dtype=np.uint8, count=n_lab, offset=8).astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if n_lab else 1
    return Dataset(x, y, int(num_classes))


def save_idx(images_path, labels_path, images, labels):
    """Write uint8 ``images`` (n, rows, cols) and ``labels`` (n,) as IDX files."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise DataError(f"images must be (n, rows, cols) with n labels; got {images.shape}, "
                        f"{labels.shape}")
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols)
                                  + images.astype(np.uint8).tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, n)
                                  + labels.astype(np.uint8).tobytes())


def synth_gaussian(num_classes, per_class, dim, spread, seed):
    """Isotropic Gaussian blobs, one per class, ``per_class`` points each.

    Class means are standard normal draws; points are mean + spread * N(0, I).
    Rows are ordered by class.
    """
    if min(num_classes, per_class, dim) < 1:
        raise ParameterError("num_classes, per_class and dim must be positive")
    if not spread > 0:
        raise ParameterError(f"spread must be positive, got {spread}")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, dim))
    noise = rng.normal(size=(num_classes, per_class, dim))
    features = (means[:, None, :] + spread * noise).reshape(-1, dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(features, labels, num_classes)


def largest_remainder(weights, total):
    """Integer counts proportional to ``weights`` summing to ``total``.

    Leftover units go to the largest fractional parts; ties go to the
    earlier position.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total < 0 or w.size == 0 or np.any(w < 0) or w.sum() <= 0:
        raise ParameterError("need non-negative weights with a positive sum")
    exact = w / w.sum() * total
    counts = np.floor(exact).astype(np.int64)
    short = int(total - counts.sum())
    if short:
        frac = exact - counts
        order = np.lexsort((np.arange(w.size), -frac))
        counts[order[:short]] += 1
    return counts


def partition_client(indices, seed, labels=None, max_tries=100):
    """Shuffle ``indices`` and cut them 60/20/20 into train/val/test.

    With ``labels`` given, the shuffle is redrawn (up to ``max_tries``) until
    train and val each contain every label the client owns; the last draw is
    kept when that never happens.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size < 5:
        raise SizeError(f"a client needs at least 5 samples, got {indices.size}")
    n_train, n_val, _ = largest_remainder(SPLIT_FRACTIONS, indices.size)
    rng = np.random.default_rng(seed)
    needed = None if labels is None else np.unique(labels[indices])
    for _ in range(max_tries):
        perm = indices[rng.permutation(indices.size)]
        client = ClientData(perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
        if needed is None:
            return client
        if (np.array_equal(np.unique(labels[client.train]), needed)
                and np.array_equal(np.unique(labels[client.val]), needed)):
            return client
    return client


def label_coverage_ok(client, labels):
    needed = np.unique(labels[client.all_indices()])
    return (np.array_equal(np.unique(labels[client.train]), needed)
            and np.array_equal(np.unique(labels[client.val]), needed))
