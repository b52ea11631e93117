"""Synthetic phantoms, volume file I/O, semi-supervised splits, crops and augmentation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import CropTooLarge, EmptyPartition, InvalidShape, IOFailure
from .grids import Mask, Volume

MIN_FG_FRACTION, MAX_FG_FRACTION = 0.02, 0.4


# ---------------------------------------------------------------- synthetic


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def _blob(shape, rng):
    """Union of 1-3 rotated ellipsoids whose surfaces carry a sinusoidal ripple."""
    grid = np.stack(np.meshgrid(*[np.arange(s) + 0.5 for s in shape], indexing="ij"), axis=-1)
    extent = np.asarray(shape, dtype=float)
    centre = extent / 2 + rng.uniform(-0.08, 0.08, 3) * extent
    inside = np.zeros(shape, dtype=bool)
    for i in range(int(rng.integers(1, 4))):
        c = centre if i == 0 else centre + rng.uniform(-0.18, 0.18, 3) * extent
        axes = rng.uniform(0.12, 0.3, 3) * extent
        rel = (grid - c) @ _random_rotation(rng)
        radius = np.sqrt(np.sum((rel / axes) ** 2, axis=-1))
        ripple = np.zeros(shape)
        for _ in range(2):
            freq = rng.uniform(1.0, 3.0, 3) * 2 * np.pi / extent
            ripple += rng.uniform(0.03, 0.1) * np.sin(grid @ freq + rng.uniform(0, 2 * np.pi))
        inside |= radius + ripple < 1.0
    return inside


def _texture(shape, rng, sigma):
    t = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return t / (t.std() + 1e-12)


def synthesize_one(shape, rng, spacing=(1.0, 1.0, 1.0)):
    """One (Volume, Mask) phantom drawn from ``rng``."""
    while True:
        mask = _blob(shape, rng)
        frac = mask.mean()
        if MIN_FG_FRACTION <= frac <= MAX_FG_FRACTION:
            break
    # foreground/background intensities overlap but have distinct means
    fg_level = 1.0 + 0.25 * _texture(shape, rng, 3.0)
    bg_level = 0.25 * _texture(shape, rng, 4.0) + 0.18 * _texture(shape, rng, 1.5)
    image = np.where(mask, fg_level, bg_level)
    image = gaussian_filter(image, 0.7) + 0.3 * rng.standard_normal(shape)
    return Volume(image.astype(np.float32), spacing), Mask(mask, spacing)


def generate_synthetic(count: int, shape=(48, 48, 48), seed: int = 0, spacing=(1.0, 1.0, 1.0)):
    """Deterministic list of ``count`` synthetic (Volume, Mask) phantoms."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 32:
        raise InvalidShape(f"synthetic volumes need >= 32 voxels per axis, got {shape}")
    if count < 0:
        raise ValueError("count must be non-negative")
    streams = np.random.SeedSequence(seed).spawn(count)
    return [synthesize_one(shape, np.random.default_rng(s), spacing) for s in streams]


def standardize(image) -> np.ndarray:
    """Zero-mean, unit-variance copy of a volume's intensities."""
    data = np.asarray(image.data if isinstance(image, Volume) else image, dtype=np.float32)
    std = float(data.std())
    return ((data - data.mean()) / (std if std > 0 else 1.0)).astype(np.float32)


# ---------------------------------------------------------------- splits


@dataclass
class DatasetSplit:
    labeled: list
    unlabeled: list
    test: list = field(default_factory=list)
    # ground truth of the unlabeled partition; diagnostics only, never read by the trainer
    unlabeled_masks: list = field(default_factory=list, repr=False)
    indices: dict = field(default_factory=dict)


def split_indices(n: int, labeled_fraction: float, seed: int, test_count: int = 0):
    if not 0 < labeled_fraction < 1:
        raise EmptyPartition(f"labeled_fraction must be in (0, 1), got {labeled_fraction}")
    if test_count < 0 or test_count >= n:
        raise EmptyPartition(f"test_count {test_count} leaves no training volumes out of {n}")
    order = np.random.default_rng(seed).permutation(n)
    test, train = order[:test_count], order[test_count:]
    n_lab = int(round(labeled_fraction * len(train)))
    if n_lab == 0 or n_lab == len(train):
        raise EmptyPartition(
            f"{len(train)} training volumes at fraction {labeled_fraction} leave an empty partition"
        )
    return {
        "labeled": sorted(int(i) for i in train[:n_lab]),
        "unlabeled": sorted(int(i) for i in train[n_lab:]),
        "test": sorted(int(i) for i in test),
    }


def split_dataset(samples, labeled_fraction: float = 0.2, seed: int = 0, test_count: int = 0):
    idx = split_indices(len(samples), labeled_fraction, seed, test_count)
    labeled = [samples[i] for i in idx["labeled"]]
    for vol, m in labeled:
        if m.is_degenerate:
            raise ValueError("labeled masks must contain foreground and background")
    return DatasetSplit(
        labeled=labeled,
        unlabeled=[samples[i][0] for i in idx["unlabeled"]],
        test=[samples[i] for i in idx["test"]],
        unlabeled_masks=[samples[i][1] for i in idx["unlabeled"]],
        indices=idx,
    )


# ---------------------------------------------------------------- crop / augment


def crop_offsets(shape, crop_shape, rng):
    crop_shape = tuple(int(c) for c in crop_shape)
    if any(c > s for c, s in zip(crop_shape, shape)) or len(crop_shape) != 3:
        raise CropTooLarge(f"crop {crop_shape} does not fit volume {tuple(shape)}")
    return tuple(int(rng.integers(0, s - c + 1)) for s, c in zip(shape, crop_shape))


def random_crop(v, m, crop_shape, rng):
    """Same random axis-aligned crop of a volume and (optionally) its mask."""
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    off = crop_offsets(data.shape, crop_shape, rng)
    sl = tuple(slice(o, o + c) for o, c in zip(off, crop_shape))
    out_v = Volume(data[sl], v.spacing) if isinstance(v, Volume) else data[sl]
    if m is None:
        return out_v, None
    mdata = m.data if isinstance(m, Mask) else np.asarray(m)
    return out_v, (Mask(mdata[sl], m.spacing) if isinstance(m, Mask) else mdata[sl])


def apply_transform(arr, flips, rotation):
    """Flip the flagged axes, then rotate ``rotation`` quarter turns in the axial (0, 1) plane."""
    out = np.asarray(arr)
    for axis, flip in enumerate(flips):
        if flip:
            out = np.flip(out, axis)
    return np.ascontiguousarray(np.rot90(out, int(rotation) % 4, axes=(0, 1)))


def transform_spacing(spacing, rotation):
    sx, sy, sz = spacing
    return (sy, sx, sz) if int(rotation) % 2 else (sx, sy, sz)


def draw_transform(rng):
    flips = tuple(bool(f) for f in rng.random(3) < 0.5)
    return flips, int(rng.integers(0, 4))


def augment(v, m, rng):
    """Random flips plus a 0/90/180/270 degree axial rotation, shared by volume and mask."""
    flips, rot = draw_transform(rng)

    def _apply(x, cls):
        if x is None:
            return None
        if isinstance(x, cls):
            return cls(apply_transform(x.data, flips, rot), transform_spacing(x.spacing, rot))
        return apply_transform(x, flips, rot)

    return _apply(v, Volume), _apply(m, Mask)


# ---------------------------------------------------------------- file format
# <stem>.raw: little-endian voxels, x fastest (Fortran order over (H, W, D))
# <stem>.json: {"shape": [H, W, D], "spacing": [...], "dtype": "f32"|"u8", "role": "image"|"mask"}

_DTYPES = {"f32": "<f4", "u8": "u1"}


def write_volume(stem, grid, role=None):
    stem = Path(stem)
    if isinstance(grid, Mask):
        data, dtype, role = grid.data.astype("u1"), "u8", role or "mask"
    else:
        data, dtype, role = np.asarray(grid.data, dtype="<f4"), "f32", role or "image"
    meta = {"shape": list(data.shape), "spacing": list(grid.spacing), "dtype": dtype, "role": role}
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".raw").write_bytes(data.tobytes(order="F"))
        stem.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    except OSError as exc:
        raise IOFailure(f"cannot write volume to {stem}: {exc}") from exc
    return stem


def read_volume(stem):
    """Load a volume written by :func:`write_volume`; masks come back as :class:`Mask`."""
    stem = Path(stem)
    if stem.suffix in (".raw", ".json"):
        stem = stem.with_suffix("")
    try:
        meta = json.loads(stem.with_suffix(".json").read_text())
        raw = stem.with_suffix(".raw").read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read volume {stem}: {exc}") from exc
    shape = tuple(meta["shape"])
    data = np.frombuffer(raw, dtype=_DTYPES[meta["dtype"]]).reshape(shape, order="F")
    if meta["role"] == "mask":
        return Mask(data.astype(bool), tuple(meta["spacing"]))
    return Volume(data.astype(np.float32), tuple(meta["spacing"]))


def write_dataset(root, samples, split_idx, extra=None):
    """Write every sample plus a ``manifest.json`` listing files per partition."""
    root = Path(root)
    entries = []
    for i, (vol, mask) in enumerate(samples):
        img = write_volume(root / f"case_{i:03d}_image", vol)
        msk = write_volume(root / f"case_{i:03d}_mask", mask)
        entries.append({"image": img.name, "mask": msk.name})
    manifest = {
        "format": "dtml-manifest-1",
        "labeled": [entries[i] for i in split_idx["labeled"]],
        "unlabeled": [entries[i] for i in split_idx["unlabeled"]],
        "test": [entries[i] for i in split_idx["test"]],
        "unlabeled_masks_hidden": True,
    }
    if extra:
        manifest.update(extra)
    path = root / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2))
    except OSError as exc:
        raise IOFailure(f"cannot write manifest {path}: {exc}") from exc
    return path


def load_manifest(path, diagnostics: bool = False) -> DatasetSplit:
    """Load a split from a manifest; unlabeled masks are read only with ``diagnostics``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise IOFailure(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent

    def pair(e):
        return read_volume(root / e["image"]), read_volume(root / e["mask"])

    split = DatasetSplit(
        labeled=[pair(e) for e in manifest["labeled"]],
        unlabeled=[read_volume(root / e["image"]) for e in manifest["unlabeled"]],
        test=[pair(e) for e in manifest["test"]],
    )
    if diagnostics:
        split.unlabeled_masks = [read_volume(root / e["mask"]) for e in manifest["unlabeled"]]
    return split
