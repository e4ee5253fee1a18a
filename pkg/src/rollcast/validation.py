"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    """Coerce to a float64 ndarray, rejecting non-finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_length(x: np.ndarray, n: int, name: str) -> None:
    if x.shape[0] != n:
        raise ValueError(f"{name} has length {x.shape[0]}, expected {n}")


def check_positive(x: np.ndarray, name: str) -> None:
    if np.any(x <= 0):
        raise ValueError(f"{name} must be strictly positive")


def check_nonnegative(x: np.ndarray, name: str) -> None:
    if np.any(x < 0):
        raise ValueError(f"{name} must be nonnegative")


def check_square(x: np.ndarray, name: str) -> None:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {x.shape}")


def freeze(arr: np.ndarray) -> np.ndarray:
    """Return a read-only view so shared arrays cannot be mutated in place."""
    out = np.asarray(arr)
    out.setflags(write=False)
    return out
