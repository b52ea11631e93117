"""Brute-force reference implementations used as independent test oracles."""
import itertools

import numpy as np

NEIGHBOURS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def brute_boundary(mask):
    mask = np.asarray(mask, dtype=bool)
    out = set()
    for idx in itertools.product(*[range(s) for s in mask.shape]):
        if not mask[idx]:
            continue
        for d in NEIGHBOURS:
            nb = tuple(i + o for i, o in zip(idx, d))
            if all(0 <= n < s for n, s in zip(nb, mask.shape)) and not mask[nb]:
                out.add(idx)
                break
    return out


def brute_nearest(sources, targets, spacing):
    """Distance from each source index to the nearest target index, all pairs."""
    sp = np.asarray(spacing, dtype=np.float64)
    src = np.asarray(sorted(sources), dtype=np.float64).reshape(-1, 3) * sp
    tgt = np.asarray(sorted(targets), dtype=np.float64).reshape(-1, 3) * sp
    out = np.empty(len(src))
    for i in range(0, len(src), 512):
        diff = src[i:i + 512, None, :] - tgt[None, :, :]
        out[i:i + 512] = np.sqrt((diff ** 2).sum(-1)).min(axis=1)
    return out


def brute_sdm(mask, spacing=(1.0, 1.0, 1.0)):
    mask = np.asarray(mask, dtype=bool)
    border = brute_boundary(mask)
    all_idx = list(itertools.product(*[range(s) for s in mask.shape]))
    dist = brute_nearest(all_idx, border, spacing).reshape(mask.shape)
    sign = np.where(mask, -1.0, 1.0)
    for b in border:
        dist[b] = 0.0
    return sign * dist


def brute_surface_lists(pred, gt, spacing=(1.0, 1.0, 1.0)):
    bp, bg = brute_boundary(pred), brute_boundary(gt)
    return brute_nearest(bp, bg, spacing), brute_nearest(bg, bp, spacing)


def brute_dice(pred, gt):
    p = {i for i, v in np.ndenumerate(np.asarray(pred, bool)) if v}
    g = {i for i, v in np.ndenumerate(np.asarray(gt, bool)) if v}
    return 1.0 if not p and not g else 2 * len(p & g) / (len(p) + len(g))


def brute_jaccard(pred, gt):
    p = {i for i, v in np.ndenumerate(np.asarray(pred, bool)) if v}
    g = {i for i, v in np.ndenumerate(np.asarray(gt, bool)) if v}
    return 1.0 if not (p | g) else len(p & g) / len(p | g)


def brute_percentile(values, q):
    """Linear interpolation between closest ranks: rank = q/100 * (n - 1)."""
    v = sorted(values)
    rank = q / 100 * (len(v) - 1)
    lo = int(np.floor(rank))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (rank - lo) * (v[hi] - v[lo])


def random_blob_mask(rng, shape, p_seed=0.02, grow=2):
    """Random non-degenerate mask: seeds dilated a few times, with holes."""
    m = rng.random(shape) < p_seed
    for _ in range(grow):
        g = m.copy()
        for ax in range(3):
            g |= np.roll(m, 1, ax) | np.roll(m, -1, ax)
        m = g & (rng.random(shape) < 0.9)
    if m.all() or not m.any():
        m = np.zeros(shape, bool)
        m[tuple(s // 2 for s in shape)] = True
    return m
