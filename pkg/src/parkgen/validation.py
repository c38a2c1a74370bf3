"""Input validation helpers for array-valued arguments.

Raster images are plain numpy arrays of shape (H, W, 3) with float values
in [0, 1]; batches stack them on a leading axis. These helpers normalize
dtypes and raise StructureError with a precise message on contract
violations, so public entry points can validate in one line.
"""

from __future__ import annotations

import numpy as np

from .errors import StructureError


def check_raster(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate a single (H, W, 3) raster in [0, 1] and return it as float64."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise StructureError(f"{name}: expected shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise StructureError(f"{name}: height and width must be >= 1, got {arr.shape[:2]}")
    arr = arr.astype(np.float64, copy=False)
    if not np.isfinite(arr).all():
        raise StructureError(f"{name}: contains non-finite values")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise StructureError(f"{name}: values must lie in [0, 1], got range [{lo:.4g}, {hi:.4g}]")
    return arr


def check_raster_batch(batch: np.ndarray, name: str = "batch") -> np.ndarray:
    """Validate an (N, H, W, 3) batch of rasters in [0, 1], return float64."""
    arr = np.asarray(batch)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise StructureError(f"{name}: expected shape (N, H, W, 3), got {np.asarray(batch).shape}")
    if arr.shape[0] < 1:
        raise StructureError(f"{name}: batch is empty")
    arr = arr.astype(np.float64, copy=False)
    if not np.isfinite(arr).all():
        raise StructureError(f"{name}: contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise StructureError(f"{name}: values must lie in [0, 1]")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    if a.shape != b.shape:
        raise StructureError(f"{what}: shape mismatch, {a.shape} vs {b.shape}")


def check_fraction(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise StructureError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_positive_int(value: int, name: str) -> int:
    if int(value) != value or value < 1:
        raise StructureError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
