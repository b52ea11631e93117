"""Training objectives for the segmentation and distance networks.

All losses operate on torch tensors of matching shape (typically
``(B, 1, H, W, D)``) and are voxel means, so their scale does not depend on
crop size. Signed distance inputs are expected to be normalized (tanh range);
:class:`~dtml.grids.SignedDistanceMap` inputs are checked for that.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NormalizationMismatch, ShapeMismatch
from .grids import Mask, ProbabilityMap, SignedDistanceMap
from .sdm import TransformConfig

EPS = 1e-7
DICE_SMOOTH = 1e-5
SUPERVISED_MODES = ("L_dis", "L_mask", "L_dis_plus_L_mask")


@dataclass(frozen=True)
class RampUpSchedule:
    max_weight: float = 0.1
    ramp_length: int = 2000
    exponent_squared: bool = False

    def __post_init__(self):
        if self.max_weight < 0 or not math.isfinite(self.max_weight):
            raise ValueError("max_weight must be finite and non-negative")
        if self.ramp_length < 1:
            raise ValueError("ramp_length must be a positive number of iterations")


@dataclass
class LossBundle:
    l_seg: float = 0.0
    l_mask: float = 0.0
    l_dis: float = 0.0
    l_con: float = 0.0
    lambda_con: float = 0.0


def _tensor(x, *, sdm=False):
    if isinstance(x, SignedDistanceMap):
        if sdm and not x.normalized:
            raise NormalizationMismatch("signed distance map must be normalized")
        x = x.data
    elif isinstance(x, (Mask, ProbabilityMap)):
        x = x.data
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    return x


def _pair(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b.to(dtype=a.dtype)


def soft_sdm_to_mask(z: torch.Tensor, k: float) -> torch.Tensor:
    """Differentiable ``sigmoid(-k z)``; foreground (z < 0) maps above 0.5."""
    return torch.sigmoid(-k * z)


def soft_dice_loss(prob: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    inter = (prob * gt).sum()
    return 1.0 - (2.0 * inter + DICE_SMOOTH) / (prob.sum() + gt.sum() + DICE_SMOOTH)


def bce(prob: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    p = prob.clamp(EPS, 1.0 - EPS)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log(1.0 - p)).mean()


def loss_seg(pred, gt) -> torch.Tensor:
    """Equal-weight soft Dice + binary cross-entropy."""
    p, g = _pair(_tensor(pred), _tensor(gt))
    return 0.5 * soft_dice_loss(p, g) + 0.5 * bce(p, g)


def loss_dis(pred_sdm, gt_sdm) -> torch.Tensor:
    p, g = _pair(_tensor(pred_sdm, sdm=True), _tensor(gt_sdm, sdm=True))
    return ((p - g) ** 2).mean()


def loss_mask(pred_sdm, gt, cfg: TransformConfig = TransformConfig()) -> torch.Tensor:
    z, g = _pair(_tensor(pred_sdm, sdm=True), _tensor(gt))
    return soft_dice_loss(soft_sdm_to_mask(z, cfg.k), g)


def loss_consistency(pred_seg, pred_sdm, cfg: TransformConfig = TransformConfig()) -> torch.Tensor:
    """Mean squared gap between the segmentation map and the transformed SDM.

    Unweighted: the ramp-up factor is applied by the trainer.
    """
    p, z = _pair(_tensor(pred_seg), _tensor(pred_sdm, sdm=True))
    return ((p - soft_sdm_to_mask(z, cfg.k)) ** 2).mean()


def supervised_md(mode: str, pred_sdm, gt, gt_sdm, cfg: TransformConfig) -> tuple:
    """Supervised term for the distance network. Returns ``(total, l_dis, l_mask)``."""
    if mode not in SUPERVISED_MODES:
        raise ValueError(f"unknown supervised mode {mode!r}; expected one of {SUPERVISED_MODES}")
    l_dis = loss_dis(pred_sdm, gt_sdm) if mode != "L_mask" else None
    l_mask = loss_mask(pred_sdm, gt, cfg) if mode != "L_dis" else None
    if mode == "L_dis":
        total = l_dis
    elif mode == "L_mask":
        total = l_mask
    else:
        total = l_dis + l_mask
    return total, l_dis, l_mask


def lambda_con(t: int, schedule: RampUpSchedule = RampUpSchedule()) -> float:
    """Consistency weight ``w * exp(-5 (1 - t/T)^p)``, constant at ``w`` for t >= T."""
    if t < 0:
        raise ValueError("iteration must be non-negative")
    if t >= schedule.ramp_length:
        return float(schedule.max_weight)
    phase = 1.0 - t / schedule.ramp_length
    power = 2 if schedule.exponent_squared else 1
    return float(schedule.max_weight * math.exp(-5.0 * phase ** power))
