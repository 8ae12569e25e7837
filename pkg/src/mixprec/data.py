"""Dataset generators, IDX file parsing, and deterministic splits.

Synthetic features are normalized to [0, 1]^2 because the unsigned
activation quantizer in front of the first layer would zero out negative
raw coordinates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    """Train/val/test arrays plus the per-sample input shape."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def input_shape(self) -> tuple:
        return self.x_train.shape[1:]

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_val.max(), self.y_test.max())) + 1


def gaussian_blobs(n: int, seed: int, spread: float = 0.08) -> tuple[np.ndarray, np.ndarray]:
    """Two linearly separable 2-D Gaussian clusters inside the unit square."""
    rng = np.random.default_rng(seed)
    half = n // 2
    centers = np.array([[0.3, 0.3], [0.7, 0.7]])
    labels = np.concatenate([np.zeros(half, dtype=np.int64),
                             np.ones(n - half, dtype=np.int64)])
    points = centers[labels] + rng.normal(0.0, spread, size=(n, 2))
    return np.clip(points, 0.0, 1.0), labels


def two_spirals(n: int, seed: int, noise: float = 0.05,
                turns: float = 1.75) -> tuple[np.ndarray, np.ndarray]:
    """Interleaved spirals, normalized to the unit square."""
    rng = np.random.default_rng(seed)
    half = n // 2
    labels = np.concatenate([np.zeros(half, dtype=np.int64),
                             np.ones(n - half, dtype=np.int64)])
    counts = np.concatenate([np.arange(half), np.arange(n - half)])
    sizes = np.where(labels == 0, half, n - half)
    t = counts / np.maximum(sizes - 1, 1)
    angle = turns * 2.0 * np.pi * t + labels * np.pi
    radius = 0.1 + 0.9 * t
    x = radius * np.cos(angle) + rng.normal(0.0, noise, size=n)
    y = radius * np.sin(angle) + rng.normal(0.0, noise, size=n)
    points = np.stack([x, y], axis=1)
    return np.clip((points + 1.0) / 2.0, 0.0, 1.0), labels


def load_idx(path) -> np.ndarray:
    """Parse one IDX file (big-endian magic, dims, raw data) bit-exactly."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ConfigError(f"{path}: too short for an IDX header")
    zero0, zero1, dtype_code, ndim = struct.unpack(">BBBB", raw[:4])
    if zero0 != 0 or zero1 != 0:
        raise ConfigError(f"{path}: bad IDX magic {raw[:4]!r}")
    if dtype_code not in _IDX_DTYPES:
        raise ConfigError(f"{path}: unknown IDX dtype code 0x{dtype_code:02x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise ConfigError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = _IDX_DTYPES[dtype_code]
    count = int(np.prod(dims)) if dims else 1
    expected = header_end + count * dtype.itemsize
    if len(raw) != expected:
        raise ConfigError(f"{path}: payload is {len(raw) - header_end} bytes, "
                          f"expected {count * dtype.itemsize}")
    data = np.frombuffer(raw, dtype=dtype, offset=header_end, count=count)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def load_idx_pair(images_path, labels_path,
                  normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Load an (images, labels) IDX pair; counts must agree."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if labels.ndim != 1:
        raise ConfigError(f"{labels_path}: labels must be 1-D, got shape {labels.shape}")
    if images.shape[0] != labels.shape[0]:
        raise ConfigError(
            f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}")
    x = images.astype(np.float64)
    if normalize and x.size and x.max() > 1.0:
        x = x / 255.0
    return x, labels.astype(np.int64)


def split_train_val(x: np.ndarray, y: np.ndarray, val_fraction: float,
                    seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_val = max(1, int(round(val_fraction * len(x))))
    val_idx, train_idx = order[:n_val], order[n_val:]
    return x[train_idx], y[train_idx], x[val_idx], y[val_idx]


def make_dataset(x: np.ndarray, y: np.ndarray, val_fraction: float,
                 test_fraction: float, seed: int) -> Dataset:
    """Deterministic three-way split of one array pair."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_test = max(1, int(round(test_fraction * len(x))))
    test_idx, rest = order[:n_test], order[n_test:]
    x_rest, y_rest = x[rest], y[rest]
    n_val = max(1, int(round(val_fraction * len(x_rest))))
    return Dataset(
        x_train=x_rest[n_val:], y_train=y_rest[n_val:],
        x_val=x_rest[:n_val], y_val=y_rest[:n_val],
        x_test=x[test_idx], y_test=y[test_idx],
    )


def synthetic_dataset(name: str, n: int, seed: int, noise: float = 0.05,
                      val_fraction: float = 0.1, test_fraction: float = 0.1) -> Dataset:
    if name == "blobs":
        x, y = gaussian_blobs(n, seed)
    elif name == "spirals":
        x, y = two_spirals(n, seed, noise=noise)
    else:
        raise ConfigError(f"unknown synthetic dataset {name!r}")
    return make_dataset(x, y, val_fraction, test_fraction, seed + 1)
