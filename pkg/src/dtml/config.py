"""Experiment configuration: schema, validation, seed fan-out and snapshots.

A config is a JSON or YAML mapping with optional sections ``data``,
``train``, ``eval``, ``ablate`` and ``convert`` plus the top-level keys
``seed`` and ``out``. Unknown keys anywhere are rejected before any work
starts.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np
import yaml

from .errors import InvalidConfig, IOFailure
from .losses import SUPERVISED_MODES
from .trainer import MODES, TrainConfig

# key -> (accepted types, default); None default means "optional / derived"
_NUM = (int, float)
SCHEMA = {
    "seed": ((int,), 0),
    "out": ((str,), "runs/default"),
    "data": {
        "root": ((str,), "data/synthetic"),
        "count": ((int,), 50),
        "shape": ((list,), [48, 48, 48]),
        "spacing": ((list,), [1.0, 1.0, 1.0]),
        "labeled_fraction": (_NUM, 0.2),
        "test_count": ((int,), 10),
    },
    "train": {name: None for name in TrainConfig.field_names() if name != "seed"},
    "eval": {
        "checkpoint": ((str, type(None)), None),
        "threshold": (_NUM, 0.5),
        "stride": ((list, type(None)), None),
        "inject_gt": ((bool,), False),
        "diagnostics": ((bool,), False),
    },
    "ablate": {
        "seeds": ((list, type(None)), None),
        "n_seeds": ((int,), 3),
        "variants": ((list, type(None)), None),
    },
    "convert": {
        "input": ((str, type(None)), None),
        "output": ((str, type(None)), None),
        "direction": ((str, type(None)), None),
        "k": (_NUM, 1500.0),
        "threshold": (_NUM, 0.5),
    },
}

VARIANTS = ["ms_only"] + [f"{m}/{s}" for m in ("md_only", "dtml") for s in SUPERVISED_MODES]
DIRECTIONS = ("mask_to_sdm", "sdm_to_mask")


def _train_defaults():
    d = TrainConfig().to_dict()
    d.pop("seed")
    return d


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise InvalidConfig(f"cannot parse config {path}: {exc}") from exc
    return resolve(raw or {})


def _check(section, key, value, types):
    if isinstance(value, bool) and bool not in types:
        raise InvalidConfig(f"{section}{key}: expected {types}, got bool")
    if not isinstance(value, types):
        names = "/".join(t.__name__ for t in types)
        raise InvalidConfig(f"{section}{key}: expected {names}, got {type(value).__name__}")


def resolve(raw: dict) -> dict:
    """Validate ``raw`` against the schema and fill in every default."""
    if not isinstance(raw, dict):
        raise InvalidConfig("config must be a mapping")
    unknown = set(raw) - set(SCHEMA)
    if unknown:
        raise InvalidConfig(f"unknown top-level keys: {sorted(unknown)}")
    out = {}
    for key in ("seed", "out"):
        types, default = SCHEMA[key]
        value = raw.get(key, default)
        _check("", key, value, types)
        out[key] = value
    for section in ("data", "train", "eval", "ablate", "convert"):
        given = raw.get(section) or {}
        if not isinstance(given, dict):
            raise InvalidConfig(f"section {section!r} must be a mapping")
        unknown = set(given) - set(SCHEMA[section])
        if unknown:
            raise InvalidConfig(f"unknown keys in {section!r}: {sorted(unknown)}")
        if section == "train":
            merged = _train_defaults()
            merged.update(given)
        else:
            merged = {}
            for key, (types, default) in SCHEMA[section].items():
                value = given.get(key, copy.deepcopy(default))
                _check(f"{section}.", key, value, types)
                merged[key] = value
        out[section] = merged
    _validate_semantics(out)
    return out


def _validate_semantics(cfg):
    d = cfg["data"]
    if len(d["shape"]) != 3 or len(d["spacing"]) != 3:
        raise InvalidConfig("data.shape and data.spacing need three entries")
    if not 0 < d["labeled_fraction"] < 1:
        raise InvalidConfig("data.labeled_fraction must lie in (0, 1)")
    try:
        train_config(cfg, cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"train: {exc}") from exc
    if not 0 < cfg["eval"]["threshold"] < 1:
        raise InvalidConfig("eval.threshold must lie in (0, 1)")
    variants = cfg["ablate"]["variants"]
    if variants is not None:
        bad = [v for v in variants if v not in VARIANTS]
        if bad:
            raise InvalidConfig(f"unknown ablation variants {bad}; choose from {VARIANTS}")
    direction = cfg["convert"]["direction"]
    if direction is not None and direction not in DIRECTIONS:
        raise InvalidConfig(f"convert.direction must be one of {DIRECTIONS}")
    if cfg["convert"]["k"] <= 0:
        raise InvalidConfig("convert.k must be positive")


def fan_out(master_seed: int) -> dict:
    """Deterministic per-purpose seeds derived from the master seed."""
    gen, split, train = np.random.SeedSequence(int(master_seed)).spawn(3)
    return {name: int(s.generate_state(1)[0]) for name, s in
            (("generate", gen), ("split", split), ("train", train))}


def train_config(cfg: dict, master_seed: int, **overrides) -> TrainConfig:
    params = dict(cfg["train"])
    params.update(overrides)
    params["seed"] = fan_out(master_seed)["train"]
    if params.get("mode") not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    return TrainConfig(**params)


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def write_snapshot(cfg: dict, directory, command: str) -> Path:
    path = Path(directory) / "resolved_config.json"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"command": command, "config_hash": config_hash(cfg), "config": cfg},
                                   indent=2, sort_keys=True))
    except OSError as exc:
        raise IOFailure(f"cannot write config snapshot {path}: {exc}") from exc
    return path
