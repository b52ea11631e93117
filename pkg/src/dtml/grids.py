"""Dense 3D grid containers: images, masks, signed distance and probability maps.

All containers hold a numpy array of shape (H, W, D) plus the physical voxel
spacing in millimetres. They are thin wrappers: the array is reachable as
``.data`` and most functions in the package also accept bare arrays, which are
promoted with unit spacing.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np

from .errors import InvalidShape, ShapeMismatch

Spacing = Tuple[float, float, float]
UNIT_SPACING: Spacing = (1.0, 1.0, 1.0)


def _check_spacing(spacing) -> Spacing:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise InvalidShape(f"spacing must be three positive finite reals, got {spacing!r}")
    return sp


def _check_3d(data: np.ndarray, what: str) -> None:
    if data.ndim != 3 or min(data.shape) < 1:
        raise InvalidShape(f"{what} must be a non-empty 3D grid, got shape {data.shape}")


@dataclass
class Volume:
    data: np.ndarray
    spacing: Spacing = UNIT_SPACING

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        _check_3d(self.data, "volume")
        self.spacing = _check_spacing(self.spacing)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Mask:
    data: np.ndarray
    spacing: Spacing = UNIT_SPACING

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != np.bool_:
            if not np.all((arr == 0) | (arr == 1)):
                raise ValueError("mask voxels must be exactly 0 or 1")
            arr = arr.astype(bool)
        self.data = arr
        _check_3d(self.data, "mask")
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_degenerate(self) -> bool:
        n = int(self.data.sum())
        return n == 0 or n == self.data.size


@dataclass
class SignedDistanceMap:
    """Negative inside the object, zero on its boundary, positive outside."""

    data: np.ndarray
    spacing: Spacing = UNIT_SPACING
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        _check_3d(self.data, "signed distance map")
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class ProbabilityMap:
    data: np.ndarray
    spacing: Spacing = UNIT_SPACING

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        _check_3d(self.data, "probability map")
        self.spacing = _check_spacing(self.spacing)
        if np.any((self.data < 0) | (self.data > 1)):
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def shape(self):
        return self.data.shape


GridLike = Union[np.ndarray, Mask, Volume, SignedDistanceMap, ProbabilityMap]


def as_mask(m) -> Mask:
    return m if isinstance(m, Mask) else Mask(np.asarray(m))


def check_same_grid(a, b) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    if not np.allclose(a.spacing, b.spacing, rtol=1e-12, atol=0):
        raise ShapeMismatch(f"spacings differ: {a.spacing} vs {b.spacing}")
