"""Seeding and input validation helpers."""

import hashlib

import numpy as np

from .exceptions import DimensionError


def derive_seed(master, *labels):
    """Derive an independent 63-bit seed from a master seed and labels.

    Every random stream in the toolkit is keyed by a purpose string plus
    indices, so adding workers or reordering loops never shifts results.
    """
    key = "/".join([str(int(master))] + [str(x) for x in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def make_rng(master, *labels):
    return np.random.default_rng(derive_seed(master, *labels))


def check_image(x, shape=None, dtype=np.float32):
    """Return ``x`` as a contiguous ``[C,H,W]`` array, optionally checking its shape."""
    arr = np.ascontiguousarray(np.asarray(getattr(x, "data", x), dtype=dtype))
    if arr.ndim != 3:
        raise DimensionError(f"expected an image of shape [C,H,W], got {arr.shape}")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise DimensionError(f"image shape {arr.shape} does not match expected {tuple(shape)}")
    return arr


def check_images(X, shape=None, dtype=np.float32):
    """Return ``X`` as a contiguous ``[N,C,H,W]`` array."""
    arr = np.ascontiguousarray(np.asarray(X, dtype=dtype))
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise DimensionError(f"expected images of shape [N,C,H,W], got {arr.shape}")
    if shape is not None and tuple(arr.shape[1:]) != tuple(shape):
        raise DimensionError(f"image shape {arr.shape[1:]} does not match expected {tuple(shape)}")
    return arr


def check_binary_labels(y, n=None):
    y = np.asarray(y)
    if y.ndim != 1:
        raise DimensionError(f"labels must be one-dimensional, got shape {y.shape}")
    if n is not None and y.shape[0] != n:
        raise DimensionError(f"got {y.shape[0]} labels for {n} samples")
    if y.size and not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int64)
