"""Input validation helpers shared across the package."""
from __future__ import annotations

import numpy as np


def as_float_array(x, name: str, shape: tuple | None = None) -> np.ndarray:
    """Coerce ``x`` to a float64 array, rejecting NaN/inf.

    ``shape`` entries of -1 match any extent.
    """
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr!r}")
    if shape is not None:
        if arr.ndim != len(shape) or any(
            want not in (-1, got) for want, got in zip(shape, arr.shape)
        ):
            raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


def check_finite_scalar(x, name: str) -> float:
    val = float(x)
    if not np.isfinite(val):
        raise ValueError(f"{name} must be finite, got {val!r}")
    return val


def check_positive(x, name: str) -> float:
    val = check_finite_scalar(x, name)
    if val <= 0:
        raise ValueError(f"{name} must be > 0, got {val}")
    return val


def check_non_negative(x, name: str) -> float:
    val = check_finite_scalar(x, name)
    if val < 0:
        raise ValueError(f"{name} must be >= 0, got {val}")
    return val


def check_unit_interval(x, name: str) -> float:
    val = check_finite_scalar(x, name)
    if not 0.0 <= val <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {val}")
    return val
