"""
Validation Utilities and Error Types.

This module provides the exception hierarchy used throughout RepGAN Lab
and the small checks that raise them (finiteness, shapes, probabilities).
"""

from typing import Any, List, Optional, Sequence, Tuple

import numpy as np


class RepganError(Exception):
    """Base class for all library errors."""

    def __init__(self, message: str, field: Optional[str] = None):
        """
        Initialize error.

        Args:
            message: Error message
            field: Field, site or key that failed validation
        """
        self.message = message
        self.field = field
        super().__init__(message)


class ConfigError(RepganError):
    """Invalid or unknown configuration."""


class DataError(RepganError):
    """Malformed or unusable input data."""


class CheckpointError(DataError):
    """Corrupt or unreadable checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class NumericDivergenceError(RepganError):
    """A non-finite value was produced."""

    def __init__(self, message: str, site: Optional[str] = None, trace: Optional[List[Any]] = None):
        """
        Initialize divergence error.

        Args:
            message: Error message
            site: Name of the computation that produced the value
            trace: Partial training trace collected before the failure
        """
        super().__init__(message, field=site)
        self.site = site
        self.trace = list(trace or [])


class ShapeMismatchError(RepganError, ValueError):
    """Operand shapes disagree."""


class DegenerateInputError(RepganError, ValueError):
    """Input for which the requested computation is undefined."""


class FrozenParameterError(RepganError):
    """An update was attempted on frozen parameters."""


def check_finite(array: Any, site: str) -> None:
    """
    Raise if an array holds NaN or Inf.

    Args:
        array: Array or scalar to check
        site: Name of the producing computation, reported on failure
    """
    if not np.all(np.isfinite(array)):
        raise NumericDivergenceError(f"Non-finite value produced at {site}", site=site)


def check_shape(array: np.ndarray, shape: Sequence[Optional[int]], name: str) -> None:
    """
    Check an array shape; ``None`` entries match any size.

    Args:
        array: Array to check
        shape: Expected shape
        name: Operand name for the error message
    """
    if array.ndim != len(shape) or any(
        expected is not None and actual != expected
        for actual, expected in zip(array.shape, shape)
    ):
        raise ShapeMismatchError(f"{name} has shape {array.shape}, expected {tuple(shape)}", field=name)


def check_same_shape(a: np.ndarray, b: np.ndarray, names: Tuple[str, str]) -> None:
    """Raise unless two arrays share a shape."""
    if a.shape != b.shape:
        raise ShapeMismatchError(
            f"{names[0]} {a.shape} and {names[1]} {b.shape} must have the same shape",
            field=names[0],
        )


def check_probability(value: float, name: str, allow_one: bool = False) -> None:
    """
    Check that a rate lies in [0, 1) (or [0, 1] with ``allow_one``).

    Args:
        value: Rate to check
        name: Parameter name
        allow_one: Whether 1.0 is admissible
    """
    upper_ok = value <= 1.0 if allow_one else value < 1.0
    if not (value >= 0.0 and upper_ok):
        bound = "[0, 1]" if allow_one else "[0, 1)"
        raise DegenerateInputError(f"{name} must lie in {bound}, got {value}", field=name)
