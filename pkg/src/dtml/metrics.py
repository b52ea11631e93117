"""Region and surface metrics between a predicted mask and ground truth."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .edt import squared_edt
from .errors import DegenerateMask
from .grids import as_mask, check_same_grid
from .sdm import boundary_mask


@dataclass
class MetricsReport:
    dice: float
    jaccard: float
    asd: float
    hd95: float

    def as_dict(self):
        return asdict(self)


def _counts(pred, gt):
    p, g = as_mask(pred), as_mask(gt)
    check_same_grid(p, g)
    inter = int(np.count_nonzero(p.data & g.data))
    return inter, int(p.data.sum()), int(g.data.sum())


def dice(pred, gt) -> float:
    inter, n_p, n_g = _counts(pred, gt)
    if n_p + n_g == 0:
        return 1.0
    return 2.0 * inter / (n_p + n_g)


def jaccard(pred, gt) -> float:
    inter, n_p, n_g = _counts(pred, gt)
    union = n_p + n_g - inter
    if union == 0:
        return 1.0
    return inter / union


def surface_distances(pred, gt):
    """Directed boundary-to-boundary nearest distances, both ways.

    Returns ``(d_pred_to_gt, d_gt_to_pred)`` as float arrays ordered by
    C-order voxel index of the source boundary.
    """
    p, g = as_mask(pred), as_mask(gt)
    check_same_grid(p, g)
    if p.is_degenerate or g.is_degenerate:
        raise DegenerateMask("surface distances need non-degenerate masks")
    bp, bg = boundary_mask(p), boundary_mask(g)
    to_gt = np.sqrt(squared_edt(bg, g.spacing)[bp])
    to_pred = np.sqrt(squared_edt(bp, p.spacing)[bg])
    return to_gt, to_pred


def asd(pred, gt) -> float:
    a, b = surface_distances(pred, gt)
    return float(np.mean(np.concatenate([a, b])))


def hd95(pred, gt) -> float:
    a, b = surface_distances(pred, gt)
    return percentile95(np.concatenate([a, b]))


def percentile95(values) -> float:
    """95th percentile with linear interpolation between closest ranks."""
    return float(np.percentile(np.asarray(values, dtype=np.float64), 95, method="linear"))


def evaluate(pred, gt) -> MetricsReport:
    """All four metrics; surface metrics are NaN when either mask is degenerate."""
    d, j = dice(pred, gt), jaccard(pred, gt)
    try:
        a, b = surface_distances(pred, gt)
    except DegenerateMask:
        return MetricsReport(d, j, float("nan"), float("nan"))
    pooled = np.concatenate([a, b])
    return MetricsReport(d, j, float(pooled.mean()), percentile95(pooled))
