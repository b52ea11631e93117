"""Command-line entry points: generate, train, eval, ablate, convert.

Exit status is 0 on success, 2 when the configuration is rejected and 3 on
any runtime failure (I/O, missing checkpoint, divergence, degenerate input).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import (
    DIRECTIONS, VARIANTS, config_hash, fan_out, load_config, resolve, train_config, write_snapshot,
)
from .data import generate_synthetic, load_manifest, read_volume, split_indices, write_dataset, write_volume
from .errors import DTMLError, InvalidConfig, IOFailure
from .grids import Mask, SignedDistanceMap, Volume
from .metrics import evaluate
from .model import load_checkpoint
from .sdm import TransformConfig, compute_sdm, normalize_sdm, sdm_to_soft_mask
from .trainer import best_network, binarize, predict_mask, train

log = logging.getLogger("dtml")

METRIC_KEYS = ("dice", "jaccard", "asd", "hd95")

# row labels used in the ablation tables
VARIANT_LABELS = {
    "ms_only": ("M_s only", "L_seg"),
    **{f"md_only/{s}": ("M_d only", s) for s in ("L_dis", "L_mask", "L_dis_plus_L_mask")},
    **{f"dtml/{s}": ("DTML", s) for s in ("L_dis", "L_mask", "L_dis_plus_L_mask")},
}


# ---------------------------------------------------------------- reporting


def summarize(rows):
    """Mean and population std of every metric, ignoring NaN entries."""
    out = {}
    for key in METRIC_KEYS:
        vals = np.array([r[key] for r in rows], dtype=float)
        vals = vals[np.isfinite(vals)]
        out[key] = {
            "mean": float(vals.mean()) if vals.size else math.nan,
            "std": float(vals.std()) if vals.size else math.nan,
            "n": int(vals.size),
        }
    return out


def _fmt(x):
    return "nan" if not np.isfinite(x) else f"{x:.6f}"


def write_report(out_dir, name, rows, summary, id_key, cfg):
    """``<name>.csv`` (one row per entry plus a mean ± std row) and ``<name>.json``."""
    out_dir = Path(out_dir)
    csv_path, json_path = out_dir / f"{name}.csv", out_dir / f"{name}.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([id_key, *METRIC_KEYS])
            for r in rows:
                writer.writerow([r[id_key], *(_fmt(r[k]) for k in METRIC_KEYS)])
            writer.writerow(["mean±std", *(f"{_fmt(summary[k]['mean'])} ± {_fmt(summary[k]['std'])}"
                                           for k in METRIC_KEYS)])
        payload = {"config_hash": config_hash(cfg), "rows": rows, "summary": summary}
        json_path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default))
    except OSError as exc:
        raise IOFailure(f"cannot write report to {out_dir}: {exc}") from exc
    return csv_path, json_path


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x))


def _metrics_row(report):
    return {k: float(v) for k, v in report.as_dict().items()}


# ---------------------------------------------------------------- commands


def cmd_generate(cfg):
    d = cfg["data"]
    seeds = fan_out(cfg["seed"])
    samples = generate_synthetic(d["count"], d["shape"], seeds["generate"], tuple(d["spacing"]))
    idx = split_indices(d["count"], d["labeled_fraction"], seeds["split"], d["test_count"])
    root = Path(d["root"])
    path = write_dataset(root, samples, idx, extra={"config_hash": config_hash(cfg)})
    write_snapshot(cfg, root, "generate")
    return path


def cmd_train(cfg):
    split = load_manifest(cfg["data"]["root"])
    tc = train_config(cfg, cfg["seed"])
    out = Path(cfg["out"])
    write_snapshot(cfg, out, "train")
    state, _ = train(split, tc, out_dir=out)
    return state


def _default_checkpoint(cfg):
    head = "dis" if cfg["train"]["mode"] == "md_only" else "seg"
    return str(Path(cfg["out"]) / f"best_{head}")


def evaluate_cases(predict, pairs):
    rows = []
    for i, (v, m) in enumerate(pairs):
        rows.append({"case": i, **_metrics_row(evaluate(predict(v, m), m))})
    return rows


def cmd_eval(cfg):
    e = cfg["eval"]
    split = load_manifest(cfg["data"]["root"])
    if not split.test:
        raise IOFailure(f"manifest in {cfg['data']['root']} lists no test volumes")
    tc = train_config(cfg, cfg["seed"])
    stride = tuple(e["stride"]) if e["stride"] else tc.stride
    if e["inject_gt"]:
        # scoring the ground truth against itself exercises the metric path alone
        def predict(v, m):
            return m
    else:
        net, _ = load_checkpoint(e["checkpoint"] or _default_checkpoint(cfg))

        def predict(v, m):
            return predict_mask(net, v, tc.crop_shape, stride, e["threshold"], tc.k)
    rows = evaluate_cases(predict, split.test)
    out = Path(cfg["out"])
    write_snapshot(cfg, out, "eval")
    summary = summarize(rows)
    write_report(out, "eval", rows, summary, "case", cfg)
    return rows, summary


def _variant_overrides(variant):
    if variant == "ms_only":
        return {"mode": "ms_only", "max_weight": 0.0}
    mode, sup = variant.split("/")
    return {"mode": mode, "supervised_mode_md": sup}


def run_cell(cfg, split, variant, master_seed):
    """Train one (variant, seed) cell in memory and score it on the test volumes."""
    tc = train_config(cfg, master_seed, **_variant_overrides(variant))
    state, _ = train(split, tc)
    net = best_network(state, tc)
    stride = tuple(cfg["eval"]["stride"]) if cfg["eval"]["stride"] else tc.stride
    rows = evaluate_cases(
        lambda v, m: predict_mask(net, v, tc.crop_shape, stride, cfg["eval"]["threshold"], tc.k),
        split.test,
    )
    return summarize(rows)


def ablation_seeds(cfg):
    seeds = cfg["ablate"]["seeds"]
    if seeds is None:
        seeds = [cfg["seed"] + i for i in range(cfg["ablate"]["n_seeds"])]
    return [int(s) for s in seeds]


def cmd_ablate(cfg, variant=None):
    variants = [variant] if variant else (cfg["ablate"]["variants"] or VARIANTS)
    split = load_manifest(cfg["data"]["root"])
    if not split.test:
        raise IOFailure(f"manifest in {cfg['data']['root']} lists no test volumes")
    seeds = ablation_seeds(cfg)
    out = Path(cfg["out"])
    write_snapshot(cfg, out, "ablate")
    per_seed, table = [], []
    for name in variants:
        means = []
        for s in seeds:
            summary = run_cell(cfg, split, name, s)
            row = {"variant": name, "seed": s, **{k: summary[k]["mean"] for k in METRIC_KEYS}}
            per_seed.append(row)
            means.append(row)
            log.info("ablate %s seed %d: Dice %.4f", name, s, row["dice"])
        method, loss = VARIANT_LABELS[name]
        agg = summarize(means)
        table.append({"variant": name, "method": method, "supervised_loss": loss,
                      "seeds": seeds, "metrics": agg})
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "method", "supervised_loss", "n_seeds", *METRIC_KEYS])
            for r in table:
                writer.writerow([r["variant"], r["method"], r["supervised_loss"], len(seeds),
                                 *(f"{_fmt(r['metrics'][k]['mean'])} ± {_fmt(r['metrics'][k]['std'])}"
                                   for k in METRIC_KEYS)])
        with open(out / "ablation_per_seed.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "seed", *METRIC_KEYS])
            for r in per_seed:
                writer.writerow([r["variant"], r["seed"], *(_fmt(r[k]) for k in METRIC_KEYS)])
        (out / "ablation.json").write_text(json.dumps(
            {"config_hash": config_hash(cfg), "table": table, "per_seed": per_seed},
            indent=2, sort_keys=True, default=_json_default))
    except OSError as exc:
        raise IOFailure(f"cannot write ablation report to {out}: {exc}") from exc
    return table


def cmd_convert(cfg):
    c = cfg["convert"]
    if not c["input"] or not c["output"]:
        raise InvalidConfig("convert needs convert.input and convert.output")
    src = read_volume(c["input"])
    direction = c["direction"] or ("mask_to_sdm" if isinstance(src, Mask) else "sdm_to_mask")
    if direction == "mask_to_sdm":
        if not isinstance(src, Mask):
            raise InvalidConfig(f"{c['input']} is not a mask; cannot convert mask_to_sdm")
        sdm = normalize_sdm(compute_sdm(src))
        result = Volume(sdm.data.astype(np.float32), sdm.spacing)
        write_volume(c["output"], result, role="image")
    else:
        if isinstance(src, Mask):
            raise InvalidConfig(f"{c['input']} is a mask; cannot convert sdm_to_mask")
        sdm = SignedDistanceMap(np.asarray(src.data, dtype=np.float64), src.spacing, normalized=True)
        result = binarize(sdm_to_soft_mask(sdm, TransformConfig(c["k"])), c["threshold"])
        write_volume(c["output"], result, role="mask")
    write_snapshot(cfg, Path(c["output"]).parent, "convert")
    return direction


# ---------------------------------------------------------------- entry point


def build_parser():
    p = argparse.ArgumentParser(prog="dtml", description="Dual-task mutual learning for 3D segmentation")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "eval", "ablate", "convert"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON or YAML experiment config")
        s.add_argument("--seed", type=int, help="override the master seed")
        s.add_argument("--out", help="override the output directory")
        s.add_argument("--k", type=float, help="soft transform steepness")
        s.add_argument("--threshold", type=float, help="binarization threshold")
        if name == "eval":
            s.add_argument("--checkpoint", help="checkpoint stem (defaults to <out>/best_*)")
            s.add_argument("--inject-gt", action="store_true", help="score ground truth as the prediction")
        if name == "ablate":
            s.add_argument("--variant", choices=VARIANTS, help="run a single variant")
        if name == "convert":
            s.add_argument("--input")
            s.add_argument("--output")
            s.add_argument("--direction", choices=DIRECTIONS)
    return p


def _apply_overrides(raw_cfg, args):
    cfg = json.loads(json.dumps(raw_cfg))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.k is not None:
        cfg["train"]["k"] = args.k
        cfg["convert"]["k"] = args.k
    if args.threshold is not None:
        cfg["eval"]["threshold"] = args.threshold
        cfg["convert"]["threshold"] = args.threshold
    if args.command == "eval":
        if args.checkpoint:
            cfg["eval"]["checkpoint"] = args.checkpoint
        if args.inject_gt:
            cfg["eval"]["inject_gt"] = True
    if args.command == "convert":
        for key in ("input", "output", "direction"):
            if getattr(args, key):
                cfg["convert"][key] = getattr(args, key)
    return resolve(cfg)


def run(argv=None):
    """Parse ``argv`` and run the command; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except InvalidConfig as exc:
        print(f"dtml: invalid config: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.variant)
        else:
            cmd_convert(cfg)
    except InvalidConfig as exc:
        print(f"dtml: invalid config: {exc}", file=sys.stderr)
        return 2
    except (DTMLError, OSError) as exc:
        print(f"dtml: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
