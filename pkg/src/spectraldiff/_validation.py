"""Input validation helpers shared across the package."""

import numpy as np


def as_float_field(x, name="field"):
    """Coerce to a float64 ndarray and require finiteness."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_grid(x, name="field"):
    """Validate a pixel or spectral field: trailing grid axes must be even.

    Accepts (H, W), (C, H, W) or any (..., H, W) stack; returns the array
    as float64.
    """
    arr = as_float_field(x, name=name)
    if arr.ndim < 2:
        raise ValueError(f"{name} must have at least 2 dimensions, got {arr.ndim}")
    n1, n2 = arr.shape[-2], arr.shape[-1]
    if n1 < 2 or n2 < 2:
        raise ValueError(f"{name} grid must be at least 2x2, got {n1}x{n2}")
    if n1 % 2 or n2 % 2:
        raise ValueError(
            f"{name} grid dimensions must be even, got {n1}x{n2}"
        )
    return arr


def check_same_shape(a, b, name_a="first", name_b="second"):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(
            f"shape mismatch: {name_a} has {a.shape}, {name_b} has {b.shape}"
        )


def check_positive_int(value, name):
    if not isinstance(value, (int, np.integer)) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
