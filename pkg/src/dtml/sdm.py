"""Signed distance maps of binary masks and the smooth map back to soft masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .edt import squared_edt
from .errors import DegenerateMap, DegenerateMask, NormalizationMismatch
from .grids import Mask, ProbabilityMap, SignedDistanceMap, as_mask

DEFAULT_K = 1500.0


@dataclass(frozen=True)
class TransformConfig:
    """Steepness of the sigmoid that turns signed distances into probabilities."""

    k: float = DEFAULT_K

    def __post_init__(self):
        if not (np.isfinite(self.k) and self.k > 0):
            raise ValueError(f"k must be positive and finite, got {self.k!r}")


def boundary_mask(mask) -> np.ndarray:
    """Boolean grid of foreground voxels with a 6-connected background neighbour.

    The volume border is padded with foreground so that faces of the grid never
    create boundary voxels.
    """
    m = as_mask(mask)
    if m.is_degenerate:
        raise DegenerateMask("mask is all-foreground or all-background")
    fg = m.data
    padded = np.pad(fg, 1, mode="constant", constant_values=True)
    bg_neighbour = np.zeros_like(fg)
    core = (slice(1, -1),) * 3
    for axis in range(3):
        for shift in (-1, 1):
            bg_neighbour |= ~np.roll(padded, shift, axis=axis)[core]
    return fg & bg_neighbour


def extract_boundary(mask) -> set[tuple[int, int, int]]:
    return {tuple(int(i) for i in idx) for idx in np.argwhere(boundary_mask(mask))}


def compute_sdm(mask) -> SignedDistanceMap:
    """Exact signed Euclidean distance to the nearest boundary voxel centre.

    Negative on interior foreground, zero on the boundary, positive on
    background; distances respect the mask's voxel spacing.
    """
    m = as_mask(mask)
    border = boundary_mask(m)
    dist = np.sqrt(squared_edt(border, m.spacing))
    dist[border] = 0.0
    dist[m.data & ~border] *= -1.0
    return SignedDistanceMap(dist, m.spacing, normalized=False)


def normalize_sdm(sdm: SignedDistanceMap) -> SignedDistanceMap:
    if sdm.normalized:
        raise NormalizationMismatch("map is already normalized")
    peak = np.max(np.abs(sdm.data))
    if peak == 0:
        raise DegenerateMap("signed distance map is identically zero")
    return SignedDistanceMap(sdm.data / peak, sdm.spacing, normalized=True)


def sdm_to_soft_mask(sdm, cfg: TransformConfig = TransformConfig()) -> ProbabilityMap:
    """Per-voxel ``1 / (1 + exp(k z))``: foreground (z < 0) maps above 0.5.

    Evaluated with a saturating logistic, so very large ``k |z|`` rounds to
    exactly 0 or 1 instead of overflowing.
    """
    if isinstance(sdm, SignedDistanceMap):
        z, spacing = sdm.data, sdm.spacing
    else:
        z, spacing = np.asarray(sdm, dtype=np.float64), (1.0, 1.0, 1.0)
    return ProbabilityMap(expit(-cfg.k * z), spacing)


def target_sdm(mask) -> np.ndarray:
    """Normalized SDM used as a regression target, defined for every mask.

    All-background masks map to +1 everywhere and all-foreground masks to -1,
    the limits of a normalized map far from any boundary.
    """
    m = as_mask(mask)
    n = int(m.data.sum())
    if n == 0:
        return np.ones(m.shape)
    if n == m.data.size:
        return -np.ones(m.shape)
    return normalize_sdm(compute_sdm(m)).data

