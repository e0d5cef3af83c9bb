"""Small argument checks used across modules."""

import math

import numpy as np

from .exceptions import InvalidInputError


def check_finite(value, name):
    value = float(value)
    if not math.isfinite(value):
        raise InvalidInputError(f"{name} must be finite, got {value!r}")
    return value


def check_positive(value, name):
    value = check_finite(value, name)
    if value <= 0.0:
        raise InvalidInputError(f"{name} must be > 0, got {value!r}")
    return value


def check_nonnegative(value, name):
    value = check_finite(value, name)
    if value < 0.0:
        raise InvalidInputError(f"{name} must be >= 0, got {value!r}")
    return value


def as_1d(values, name, *, dtype=float):
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def check_probability_vector(weights, name="weights", atol=1e-12):
    w = as_1d(weights, name)
    if w.size == 0:
        raise InvalidInputError(f"{name} is empty")
    if np.any(w < 0.0):
        raise InvalidInputError(f"{name} has negative entries")
    total = w.sum()
    if abs(total - 1.0) > atol:
        raise InvalidInputError(f"{name} must sum to 1 (sum={total!r})")
    return w
