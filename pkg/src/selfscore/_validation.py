"""Input validation helpers shared by the operators and estimators."""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError


def check_image(x, name: str = "x", allow_batch: bool = True) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 2 or (not allow_batch and x.ndim != 2):
        raise DimensionError(f"{name} must be a 2D image, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_coil_array(x, name: str = "x") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 3:
        raise DimensionError(f"{name} must have shape (..., C, H, W), got {x.shape}")
    if x.shape[-3] < 1:
        raise DimensionError(f"{name} needs at least one coil")
    return x


def check_same_grid(a, b, name_a: str, name_b: str) -> None:
    if tuple(a) != tuple(b):
        raise DimensionError(f"{name_a} shape {tuple(a)} does not match {name_b} shape {tuple(b)}")


def check_positive(value: float, name: str) -> float:
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return float(value)


def check_records(records, name: str = "records") -> list:
    records = list(records)
    if not records:
        raise ValueError(f"{name} must be non-empty")
    return records
