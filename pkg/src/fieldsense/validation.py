"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def require(condition: bool, message: str) -> None:
    """Raise ValueError with `message` unless `condition` holds."""
    if not condition:
        raise ValueError(message)


def as_float_matrix(value, name: str = "X") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    A = np.asarray(value, dtype=np.float64)
    require(A.ndim == 2, f"{name} must be 2-D, got ndim={A.ndim}")
    require(A.size == 0 or bool(np.isfinite(A).all()), f"{name} contains non-finite entries")
    return A


def as_index_array(value, name: str = "indices") -> np.ndarray:
    idx = np.asarray(value, dtype=np.intp).ravel()
    return idx


def check_count(value, name: str, minimum: int = 1) -> int:
    count = int(value)
    require(count >= minimum, f"{name} must be >= {minimum}, got {value}")
    return count
