"""Semi-supervised mutual learning of a segmentation and a distance network.

Each iteration updates both networks simultaneously. The segmentation net
minimises its supervised loss on labeled crops plus the weighted consistency
gap to the (frozen) transformed distance prediction on all crops; the
distance net does the same with its own supervised term and the segmentation
prediction frozen.
"""
from __future__ import annotations

import copy
import csv
import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .data import DatasetSplit, augment, random_crop, standardize
from .errors import CropTooLarge, FatalDivergence
from .grids import Mask, ProbabilityMap, SignedDistanceMap, Volume
from .losses import (SUPERVISED_MODES, RampUpSchedule, lambda_con, loss_consistency,
                     loss_seg, supervised_md)
from .metrics import dice, evaluate
from .model import Descriptor, build_backbone, save_checkpoint
from .sdm import TransformConfig, sdm_to_soft_mask, target_sdm

log = logging.getLogger(__name__)

MODES = ("dtml", "ms_only", "md_only")
LOG_COLUMNS = ("iteration", "lr", "lambda_con", "l_seg", "l_md_supervised", "l_con_s", "l_con_d")


@dataclass
class TrainConfig:
    total_iterations: int = 2000
    base_lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 800
    labeled_per_batch: int = 2
    unlabeled_per_batch: int = 2
    crop_shape: tuple = (32, 32, 32)
    max_weight: float = 0.1
    ramp_length: int | None = None  # defaults to total_iterations
    exponent_squared: bool = False
    supervised_mode_md: str = "L_mask"
    k: float = 1500.0
    levels: int = 3
    width: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    mode: str = "dtml"
    seed: int = 0
    eval_every: int = 200
    checkpoint_every: int = 200
    eval_stride: tuple | None = None

    def __post_init__(self):
        self.crop_shape = tuple(int(c) for c in self.crop_shape)
        if self.eval_stride is not None:
            self.eval_stride = tuple(int(s) for s in self.eval_stride)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.supervised_mode_md not in SUPERVISED_MODES:
            raise ValueError(f"supervised_mode_md must be one of {SUPERVISED_MODES}")
        for name in ("labeled_per_batch", "lr_decay_every", "eval_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.total_iterations < 0 or self.unlabeled_per_batch < 0:
            raise ValueError("iteration and batch counts must be non-negative")
        if len(self.crop_shape) != 3:
            raise ValueError("crop_shape needs three entries")
        self.descriptor.check_input_shape(self.crop_shape)

    @property
    def descriptor(self) -> Descriptor:
        return Descriptor(levels=self.levels, width=self.width)

    @property
    def ramp(self) -> RampUpSchedule:
        return RampUpSchedule(self.max_weight, self.ramp_length or max(self.total_iterations, 1),
                              self.exponent_squared)

    @property
    def transform(self) -> TransformConfig:
        return TransformConfig(self.k)

    @property
    def train_s(self) -> bool:
        return self.mode in ("dtml", "ms_only")

    @property
    def train_d(self) -> bool:
        return self.mode in ("dtml", "md_only")

    @property
    def stride(self):
        return self.eval_stride or tuple(max(1, c // 2) for c in self.crop_shape)

    def to_dict(self):
        d = asdict(self)
        d["crop_shape"] = list(self.crop_shape)
        if self.eval_stride is not None:
            d["eval_stride"] = list(self.eval_stride)
        return d

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def derive_seeds(seed: int):
    """Independent streams for (seg init, dis init, batch sampling)."""
    children = np.random.SeedSequence(int(seed)).spawn(3)
    return tuple(int(c.generate_state(1)[0]) for c in children)


def lr_at(t: int, cfg: TrainConfig) -> float:
    return cfg.base_lr * cfg.lr_decay_factor ** (t // cfg.lr_decay_every)


@dataclass
class TrainState:
    net_s: torch.nn.Module
    net_d: torch.nn.Module
    opt_s: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    data_seed: int
    t: int = 0
    history: list = field(default_factory=list)
    best: dict | None = None


def init_state(cfg: TrainConfig) -> TrainState:
    seed_s, seed_d, data_seed = derive_seeds(cfg.seed)
    net_s = build_backbone(cfg.descriptor, "seg", seed_s)
    net_d = build_backbone(cfg.descriptor, "dis", seed_d)

    def sgd(net):
        return torch.optim.SGD(net.parameters(), lr=cfg.base_lr, momentum=cfg.momentum,
                               weight_decay=cfg.weight_decay)

    return TrainState(net_s, net_d, sgd(net_s), sgd(net_d), data_seed)


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    labeled_images: torch.Tensor  # (L, 1, h, w, d)
    labeled_masks: torch.Tensor
    labeled_sdms: torch.Tensor | None
    unlabeled_images: torch.Tensor  # (U, 1, h, w, d), U may be 0


class BatchSampler:
    """Deterministic crop/augment stream over a split.

    Every crop in iteration ``t`` draws from its own generator seeded by
    ``(data_seed, t, slot)``, so results do not depend on worker count or on
    whether the unlabeled half is materialised.
    """

    def __init__(self, split: DatasetSplit, cfg: TrainConfig, data_seed: int, workers: int | None = None):
        self.labeled = [(standardize(v), m.data) for v, m in split.labeled]
        self.unlabeled = [standardize(v) for v in split.unlabeled]
        if not self.labeled:
            raise ValueError("training needs at least one labeled volume")
        for arr in [a for a, _ in self.labeled] + self.unlabeled:
            if any(c > s for c, s in zip(cfg.crop_shape, arr.shape)):
                raise CropTooLarge(f"crop {cfg.crop_shape} does not fit volume {arr.shape}")
        self.cfg = cfg
        self.data_seed = data_seed
        if workers is None:
            workers = int(os.environ.get("DTML_NUM_WORKERS", "0") or 0)
        self.workers = workers
        self.need_sdm = cfg.train_d and cfg.supervised_mode_md != "L_mask"

    def _pick(self, rng, n, size):
        if size == 0 or n == 0:
            return []
        return [int(i) for i in rng.choice(n, size=size, replace=n < size)]

    def _labeled_crop(self, t, slot, idx):
        rng = np.random.default_rng([self.data_seed, t, slot])
        img, msk = self.labeled[idx]
        img, msk = random_crop(img, msk, self.cfg.crop_shape, rng)
        img, msk = augment(img, msk, rng)
        sdm = target_sdm(Mask(msk)) if self.need_sdm else None
        return img, msk, sdm

    def _unlabeled_crop(self, t, slot, idx):
        rng = np.random.default_rng([self.data_seed, t, slot])
        img, _ = random_crop(self.unlabeled[idx], None, self.cfg.crop_shape, rng)
        img, _ = augment(img, None, rng)
        return img

    def batch(self, t: int, with_unlabeled: bool = True) -> Batch:
        cfg = self.cfg
        rng = np.random.default_rng([self.data_seed, t])
        lab = self._pick(rng, len(self.labeled), cfg.labeled_per_batch)
        unl = self._pick(rng, len(self.unlabeled), cfg.unlabeled_per_batch) if with_unlabeled else []
        nl = len(lab)
        jobs_l = [(t, s, i) for s, i in enumerate(lab)]
        jobs_u = [(t, nl + s, i) for s, i in enumerate(unl)]
        if self.workers > 0:
            with ThreadPoolExecutor(self.workers) as pool:
                lab_out = list(pool.map(lambda a: self._labeled_crop(*a), jobs_l))
                unl_out = list(pool.map(lambda a: self._unlabeled_crop(*a), jobs_u))
        else:
            lab_out = [self._labeled_crop(*a) for a in jobs_l]
            unl_out = [self._unlabeled_crop(*a) for a in jobs_u]

        def stack(arrs):
            if not arrs:
                return torch.zeros((0, 1) + cfg.crop_shape)
            return torch.from_numpy(np.stack(arrs)[:, None].astype(np.float32))

        return Batch(
            labeled_images=stack([o[0] for o in lab_out]),
            labeled_masks=stack([o[1] for o in lab_out]),
            labeled_sdms=stack([o[2] for o in lab_out]) if self.need_sdm else None,
            unlabeled_images=stack(unl_out),
        )


# ---------------------------------------------------------------- step


def compute_losses(state: TrainState, batch: Batch, cfg: TrainConfig, lam: float):
    """Forward both networks and build each network's objective.

    Returns ``(total_s, total_d, row)``; a total is ``None`` when that network
    is not trained in ``cfg.mode``. Each consistency term sees the peer's
    prediction detached, so ``total_s`` has no path to the distance network's
    parameters and vice versa.
    """
    coupled = lam > 0 and cfg.train_s and cfg.train_d
    x = batch.labeled_images
    if coupled and batch.unlabeled_images.shape[0]:
        x = torch.cat([x, batch.unlabeled_images])
    nl = batch.labeled_images.shape[0]
    tcfg = cfg.transform
    row = {"l_seg": 0.0, "l_md_supervised": 0.0, "l_con_s": 0.0, "l_con_d": 0.0}
    total_s = total_d = None

    seg = state.net_s(x) if cfg.train_s else None
    dis = state.net_d(x) if cfg.train_d else None
    if cfg.train_s:
        total_s = loss_seg(seg[:nl], batch.labeled_masks)
        row["l_seg"] = total_s.item()
        if coupled:
            l_con_s = loss_consistency(seg, dis.detach(), tcfg)
            row["l_con_s"] = l_con_s.item()
            total_s = total_s + lam * l_con_s
    if cfg.train_d:
        total_d, _, _ = supervised_md(cfg.supervised_mode_md, dis[:nl], batch.labeled_masks,
                                      batch.labeled_sdms, tcfg)
        row["l_md_supervised"] = total_d.item()
        if coupled:
            l_con_d = loss_consistency(seg.detach(), dis, tcfg)
            row["l_con_d"] = l_con_d.item()
            total_d = total_d + lam * l_con_d
    return total_s, total_d, row


def _params_finite(net):
    return all(bool(torch.isfinite(p).all()) for p in net.parameters())


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> TrainState:
    """One simultaneous momentum-SGD update of both networks (in place)."""
    t = state.t
    lam = lambda_con(t, cfg.ramp) if cfg.mode == "dtml" else 0.0
    lr = lr_at(t, cfg)
    state.net_s.train()
    state.net_d.train()
    total_s, total_d, row = compute_losses(state, batch, cfg, lam)

    for name, total in (("M_s", total_s), ("M_d", total_d)):
        if total is not None and not torch.isfinite(total):
            raise FatalDivergence(f"{name} loss became non-finite at iteration {t}")

    for net, opt, total in ((state.net_s, state.opt_s, total_s), (state.net_d, state.opt_d, total_d)):
        if total is None:
            continue
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        if not _params_finite(net):
            raise FatalDivergence(f"non-finite parameters after iteration {t}")

    state.t = t + 1
    state.history.append({"iteration": t, "lr": lr, "lambda_con": lam, **row})
    return state


# ---------------------------------------------------------------- inference


def window_starts(length: int, crop: int, stride: int):
    """Window origins along one axis; the last window is clamped to the edge."""
    if crop > length:
        raise CropTooLarge(f"window {crop} exceeds axis length {length}")
    if stride < 1 or stride > crop:
        raise ValueError(f"stride must be in [1, {crop}], got {stride}")
    starts = list(range(0, length - crop + 1, stride))
    if starts[-1] != length - crop:
        starts.append(length - crop)
    return starts


def window_origins(shape, crop_shape, stride):
    starts = [window_starts(L, c, s) for L, c, s in zip(shape, crop_shape, stride)]
    return list(itertools.product(*starts))


def coverage_counts(shape, crop_shape, stride) -> np.ndarray:
    """Number of sliding windows covering each voxel."""
    count = np.zeros(shape, dtype=np.int64)
    for org in window_origins(shape, crop_shape, stride):
        count[tuple(slice(o, o + c) for o, c in zip(org, crop_shape))] += 1
    return count


@torch.no_grad()
def sliding_window_predict(net, v, crop_shape, stride=None, head=None, batch_size: int = 4):
    """Average overlapping window predictions over the whole volume.

    ``v`` is fed to the network as-is (standardise beforehand). Returns a
    :class:`ProbabilityMap` for the segmentation head or a normalized
    :class:`SignedDistanceMap` for the distance head.
    """
    head = head or net.head_kind
    if head != net.head_kind:
        raise ValueError(f"network has head {net.head_kind!r}, asked for {head!r}")
    data = np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float32)
    spacing = v.spacing if isinstance(v, Volume) else (1.0, 1.0, 1.0)
    crop_shape = tuple(int(c) for c in crop_shape)
    stride = tuple(int(s) for s in (stride or crop_shape))
    origins = window_origins(data.shape, crop_shape, stride)

    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    acc = np.zeros(data.shape, dtype=np.float64)
    count = np.zeros(data.shape, dtype=np.int64)
    for i in range(0, len(origins), batch_size):
        chunk = origins[i:i + batch_size]
        sls = [tuple(slice(o, o + c) for o, c in zip(org, crop_shape)) for org in chunk]
        x = torch.from_numpy(np.stack([data[sl] for sl in sls])[:, None]).to(dtype)
        out = net(x)[:, 0].double().numpy()
        for sl, pred in zip(sls, out):
            acc[sl] += pred
            count[sl] += 1
    net.train(was_training)
    avg = acc / count
    if head == "seg":
        return ProbabilityMap(np.clip(avg, 0.0, 1.0), spacing)
    return SignedDistanceMap(avg, spacing, normalized=True)


def binarize(p, threshold: float = 0.5) -> Mask:
    """Foreground where ``p >= threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    data = p.data if isinstance(p, ProbabilityMap) else np.asarray(p)
    spacing = p.spacing if isinstance(p, ProbabilityMap) else (1.0, 1.0, 1.0)
    return Mask(data >= threshold, spacing)


def predict_mask(net, volume: Volume, crop_shape, stride=None, threshold=0.5, k=1500.0) -> Mask:
    """Standardise, run sliding-window inference, and threshold.

    Distance-head output is first mapped through the soft inverse transform.
    """
    img = Volume(standardize(volume), volume.spacing)
    out = sliding_window_predict(net, img, crop_shape, stride)
    if isinstance(out, SignedDistanceMap):
        out = sdm_to_soft_mask(out, TransformConfig(k))
    return binarize(out, threshold)


def evaluate_pairs(net, pairs, crop_shape, stride=None, threshold=0.5, k=1500.0):
    return [evaluate(predict_mask(net, v, crop_shape, stride, threshold, k), m) for v, m in pairs]


def scored_network(state: TrainState, cfg: TrainConfig):
    """The network whose output is scored: the segmentation net unless only M_d trains."""
    return state.net_d if cfg.mode == "md_only" else state.net_s


def labeled_dice(state: TrainState, split: DatasetSplit, cfg: TrainConfig) -> float:
    net = scored_network(state, cfg)
    scores = [dice(predict_mask(net, v, cfg.crop_shape, cfg.stride, k=cfg.k), m)
              for v, m in split.labeled]
    return float(np.mean(scores))


# ---------------------------------------------------------------- loop


def write_loss_log(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({c: repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in LOG_COLUMNS})


def _snapshot(state):
    return {"s": copy.deepcopy(state.net_s.state_dict()), "d": copy.deepcopy(state.net_d.state_dict())}


def _save(state, out_dir, tag, iteration):
    save_checkpoint(state.net_s, Path(out_dir) / f"{tag}_seg", iteration)
    save_checkpoint(state.net_d, Path(out_dir) / f"{tag}_dis", iteration)


def train(split: DatasetSplit, cfg: TrainConfig, out_dir=None, workers: int | None = None):
    """Run ``cfg.total_iterations`` steps. Returns ``(state, loss_log)``.

    Every ``eval_every`` iterations (and at the end) the scored network's
    Dice on the labeled volumes is measured and the best parameters are kept
    in ``state.best``. With ``out_dir`` the loss CSV and the ``last``, ``best``
    and ``final`` checkpoints are written; on divergence the last good
    checkpoint stays on disk and the error propagates.
    """
    state = init_state(cfg)
    if cfg.total_iterations == 0:
        return state, state.history
    sampler = BatchSampler(split, cfg, state.data_seed, workers)
    with_unlabeled = cfg.mode == "dtml" and cfg.max_weight > 0
    try:
        for t in range(cfg.total_iterations):
            train_step(state, sampler.batch(t, with_unlabeled), cfg)
            done = state.t
            if done % cfg.eval_every == 0 or done == cfg.total_iterations:
                score = labeled_dice(state, split, cfg)
                log.info("iteration %d: labeled Dice %.4f", done, score)
                if state.best is None or score > state.best["dice"]:
                    state.best = {"iteration": done, "dice": score, **_snapshot(state)}
                    if out_dir is not None:
                        _save(state, out_dir, "best", done)
            if out_dir is not None and done % cfg.checkpoint_every == 0:
                _save(state, out_dir, "last", done)
    finally:
        if out_dir is not None:
            write_loss_log(state.history, Path(out_dir) / "loss_log.csv")
    if out_dir is not None:
        _save(state, out_dir, "final", state.t)
    return state, state.history


def best_network(state: TrainState, cfg: TrainConfig):
    """Copy of the scored network loaded with the best-selected parameters."""
    net = copy.deepcopy(scored_network(state, cfg))
    if state.best is not None:
        net.load_state_dict(state.best["d" if cfg.mode == "md_only" else "s"])
    net.eval()
    return net
