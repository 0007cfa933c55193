"""Argument checking shared across the package.

Mismatched dimensions raise immediately instead of relying on numpy
broadcasting, which would silently produce wrong shapes.
"""
from __future__ import annotations

import numpy as np


def as_float_vector(values, name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_param_vector(theta, dim: int, name: str = "theta") -> np.ndarray:
    arr = as_float_vector(theta, name=name)
    if arr.size != dim:
        raise ValueError(f"{name} has dimension {arr.size}, expected {dim}")
    return arr


def check_same_dim(a: np.ndarray, b: np.ndarray, a_name: str = "a", b_name: str = "b") -> None:
    if a.shape != b.shape:
        raise ValueError(
            f"{a_name} and {b_name} have mismatched shapes: {a.shape} vs {b.shape}"
        )


def check_positive(value: float, name: str) -> float:
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive and finite, got {value}")
    return float(value)


def check_nonnegative(value: float, name: str) -> float:
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be nonnegative and finite, got {value}")
    return float(value)


def check_open_unit(value: float, name: str) -> float:
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    return float(value)
