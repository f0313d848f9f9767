"""Small input-validation helpers used by the public entry points."""

import numpy as np

from .errors import ConfigurationError, NumericError


def check_positive(name: str, value: int, minimum: int = 1) -> int:
    value = int(value)
    if value < minimum:
        raise ConfigurationError(f"{name} must be >= {minimum}, got {value}")
    return value


def check_nonnegative(name: str, value: float) -> float:
    value = float(value)
    if value < 0:
        raise ConfigurationError(f"{name} must be >= 0, got {value}")
    return value


def check_finite(name: str, arr) -> np.ndarray:
    """Return ``arr`` as an ndarray, raising NumericError on NaN/inf."""
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def check_matrix(name: str, arr, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.shape != shape:
        raise ConfigurationError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr
