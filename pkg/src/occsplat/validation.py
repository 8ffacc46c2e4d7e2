"""Input validation helpers used at public API boundaries."""

from __future__ import annotations

import numpy as np

from .errors import InvalidInput


def as_array(x, shape=None, name: str = "array") -> np.ndarray:
    """Convert to a float64 ndarray, optionally enforcing a shape.

    Entries of `shape` set to -1 are free.
    """
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None:
        if arr.ndim != len(shape):
            raise InvalidInput(f"{name}: expected {len(shape)}d, got {arr.ndim}d")
        for want, got in zip(shape, arr.shape):
            if want != -1 and want != got:
                raise InvalidInput(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name}: contains non-finite values")
    return arr


def check_image(img, name: str = "image") -> np.ndarray:
    """Validate an H x W x 3 image with values in [0, 1]."""
    arr = as_array(img, (-1, -1, 3), name)
    check_finite(arr, name)
    if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
        raise InvalidInput(f"{name}: values outside [0, 1]")
    return arr


def check_map(m, name: str = "map") -> np.ndarray:
    """Validate a single-channel H x W map."""
    arr = as_array(m, (-1, -1), name)
    check_finite(arr, name)
    return arr


def check_mask(m, name: str = "mask") -> np.ndarray:
    """Validate a binary H x W mask; returns float64 values in {0, 1}."""
    arr = check_map(m, name)
    bad = ~((arr == 0) | (arr == 1))
    if bad.any():
        raise InvalidInput(f"{name}: non-binary values present")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, name: str = "inputs"):
    if a.shape != b.shape:
        raise InvalidInput(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def check_probability(p: float, name: str = "probability") -> float:
    p = float(p)
    if not (0.0 <= p <= 1.0):
        raise InvalidInput(f"{name}: must be in [0, 1], got {p}")
    return p


def check_positive(x: float, name: str = "value") -> float:
    x = float(x)
    if not np.isfinite(x) or x <= 0:
        raise InvalidInput(f"{name}: must be positive and finite, got {x}")
    return x
