"""Datasets: IDX (MNIST-format) files and synthetic 2-D tasks rendered as images.

Synthetic layout: a 2-D point (x, y) becomes a 2 x S x S image. Channel 0
is a vertical Gaussian stripe centred on the column that matches x, channel 1
a horizontal stripe on the row that matches y, both over the coordinate
window [-3, 3] with one-pixel width. Images are then standardized over the
whole dataset, like IDX images.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
COORD_WINDOW = 3.0


class IDXFormatError(ValueError):
    pass


class IDXConsistencyError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.y)

    @property
    def image_shape(self):
        return self.x.shape[1:]

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def split(self, val_fraction=0.1, seed=0):
        """Deterministic (train, val) split."""
        perm = np.random.default_rng([seed, 0x5EED]).permutation(len(self))
        n_val = int(round(val_fraction * len(self)))
        return self.subset(np.sort(perm[n_val:])), self.subset(np.sort(perm[:n_val]))


def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, expected_magic):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IDXFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IDXFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IDXFormatError(f"{path}: truncated data ({len(raw) - header} of {count} bytes)")
    if len(raw) - header > count:
        raise IDXFormatError(f"{path}: {len(raw) - header - count} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array):
    """Write an unsigned-byte IDX file (1-d labels or 3-d images)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def standardize(x):
    std = x.std()
    return (x - x.mean()) / (std if std > 0 else 1.0)


def load_idx(images_path, labels_path, standardized=True):
    images = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IDXConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    if standardized:
        x = standardize(x)
    y = labels.astype(np.int64)
    return Dataset(x, y, int(y.max()) + 1 if len(y) else 0)


def _blob_points(rng, n, noise, classes):
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = 1.5 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    y = np.arange(n) % classes
    pts = centers[y] + noise * rng.standard_normal((n, 2))
    return pts, y


def _moon_points(rng, n, noise):
    y = np.arange(n) % 2
    t = rng.uniform(0, np.pi, n)
    pts = np.where(y[:, None] == 0,
                   np.stack([np.cos(t), np.sin(t)], axis=1),
                   np.stack([1 - np.cos(t), 0.5 - np.sin(t)], axis=1))
    pts = pts - np.array([0.5, 0.25])
    pts = pts * 1.5 + noise * rng.standard_normal((n, 2))
    return pts, y


def render_points(pts, size=8):
    grid = np.linspace(-COORD_WINDOW, COORD_WINDOW, size)
    width = grid[1] - grid[0]
    cols = np.exp(-((grid[None, :] - pts[:, :1]) ** 2) / (2 * width ** 2))
    rows = np.exp(-((grid[None, :] - pts[:, 1:]) ** 2) / (2 * width ** 2))
    img = np.empty((len(pts), 2, size, size))
    img[:, 0] = cols[:, None, :]
    img[:, 1] = rows[:, :, None]
    return img


def synth_dataset(kind="blobs", n=1000, noise=0.5, seed=0, classes=4, size=8):
    """Deterministic synthetic dataset with ``n`` samples per class."""
    n_classes = classes if kind == "blobs" else 2
    if n < 2:
        raise ValueError(f"need at least 2 samples per class, got n={n}")
    rng = np.random.default_rng(seed)
    n = n * n_classes
    if kind == "blobs":
        pts, y = _blob_points(rng, n, noise, classes)
    elif kind == "moons":
        pts, y = _moon_points(rng, n, noise)
    else:
        raise ValueError(f"unknown synthetic dataset {kind!r}")
    perm = rng.permutation(n)
    x = standardize(render_points(pts[perm], size))
    return Dataset(x, y[perm].astype(np.int64), n_classes)
