"""Exceptions and small input-checking helpers shared across modules."""

import numbers

import numpy as np
from sklearn.utils import check_array


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class DegenerateFitError(RuntimeError):
    """Raised when EM cannot produce a non-singular mixture."""


class SimulationDivergedError(RuntimeError):
    """Raised when an SDE simulation produces non-finite or runaway states."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingDivergedError(RuntimeError):
    """Raised when a loss, gradient or parameter vector becomes non-finite.

    ``iteration`` is the failing iteration; ``last_params`` holds the last
    finite parameters when the training loop had them.
    """

    def __init__(self, message, iteration=None, last_params=None):
        super().__init__(message)
        self.iteration = iteration
        self.last_params = last_params


class CheckpointParseError(ValueError):
    """Raised for malformed checkpoint or spec files."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


def as_points(y, d=None, name="y"):
    """Return ``y`` as a float64 (n, d) array plus a flag telling whether it was 1-D."""
    arr = np.asarray(y, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be a vector or a 2-D array, got shape {arr.shape}")
    if d is not None and arr.shape[1] != d:
        raise InvalidInputError(f"{name} has dimension {arr.shape[1]}, expected {d}")
    return arr, single


def check_samples(X, name="X", min_samples=1):
    try:
        return check_array(X, dtype=np.float64, ensure_min_samples=min_samples)
    except ValueError as exc:
        raise InvalidInputError(f"{name}: {exc}") from exc


def check_positive(value, name, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise InvalidInputError(f"{name} must be a finite real, got {value!r}")
    if (strict and value <= 0) or (not strict and value < 0):
        bound = "> 0" if strict else ">= 0"
        raise InvalidInputError(f"{name} must be {bound}, got {value!r}")
    return float(value)


def check_int(value, name, minimum=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise InvalidInputError(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise InvalidInputError(f"{name} must be >= {minimum}, got {value!r}")
    return int(value)
