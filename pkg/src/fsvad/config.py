"""Experiment configuration: nested JSON with defaults and ``section.key=value`` overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .synthdata import VideoConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "runs/default",
    "dtype": "float32",
    "jobs": 1,
    "data": {
        "root": None,
        "video": VideoConfig().to_dict(),
        "source_classes": 6,
        "source_per_class": 20,
        "anomaly_types": ["jitter", "speedup"],
        "n_normal": 100,
        "n_per_type": 20,
        # optional manifest used for adaptation instead of the target normals
        "adapt_manifest": None,
    },
    "encoder": {"widths": [16, 32, 64], "feature_dim": 64},
    "pretrain": {
        "epochs": 40,
        "optimizer": "adam",
        "lr": 0.003,
        "momentum": 0.9,
        "batch_size": 16,
        "clip_len": 8,
        "frame_rate": 1,
    },
    "dam": {
        "epochs": 20,
        "batch_size": 16,
        "bank_size": 32,
        "optimizer": "adam",
        "lr": 0.0001,
        "momentum": 0.9,
        "temperature": 0.1,
        "triplet": {
            "clip_len": 8,
            "frame_rate": 1,
            "rotation_deg": 15.0,
            "crop_scale": [0.7, 1.0],
            "jitter": 0.2,
            "warp_strength": 0.15,
            "warp_perspective": 0.004,
            "independent_crops": False,
            "min_shift": 8,
            "shared_augment": True,
        },
    },
    "mcpm": {
        "clip_len": 8,
        "stride": 4,
        "min_len": 20,
        "max_len": 124,
        "d_graph": 32,
        "k": 3,
        "lift_kernel": 1,
        "head": "cosine",
        "temperature": 10.0,
        "optimizer": "adam",
        "lr": 0.001,
        "batch_size": 4,
        "epochs": 60,
    },
    "head": {
        "kind": "cosine",
        "temperature": 10.0,
        "optimizer": "adam",
        "lr": 0.01,
        "epochs": 100,
        "clip_len": 8,
        "frame_rate": 1,
    },
    "episodes": {
        "n_way": 2,
        "k_shots": 5,
        "q_queries": 15,
        "n_episodes": 200,
        "type_filters": ["all"],
    },
    "ablation": {"use_pretrain": True, "use_dam": True, "use_mcpm": True},
    # hypersphere baseline reported next to the main method when enabled
    "one_class": {"enabled": False, "val_normal": 20, "val_per_type": 10},
}


def deep_merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[k], dict) and not isinstance(v, dict):
            raise ConfigError(f"config key {where!r} must be a section")
        if isinstance(out[k], dict):
            out[k] = deep_merge(out[k], v, where + ".")
        else:
            out[k] = v
    return out


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        value = parse_value(raw)
        if isinstance(node[parts[-1]], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} is a section; set its keys individually")
            value = deep_merge(node[parts[-1]], value, key + ".")
        node[parts[-1]] = value
    return cfg


def load_config(path=None, overrides: list[str] | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        cfg = deep_merge(cfg, doc)
    cfg = apply_overrides(cfg, overrides or [])
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["dtype"] not in ("float32", "float64"):
        raise ConfigError("dtype must be float32 or float64")
    ab = cfg["ablation"]
    for k in ("use_pretrain", "use_dam", "use_mcpm"):
        if not isinstance(ab[k], bool):
            raise ConfigError(f"ablation.{k} must be true or false")
    if cfg["episodes"]["n_way"] != 2:
        raise ConfigError("episodes.n_way must be 2")
    if not cfg["episodes"]["type_filters"]:
        raise ConfigError("episodes.type_filters must be non-empty")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")


def variant_name(ablation: dict) -> str:
    parts = [name for flag, name in (("use_pretrain", "pretrain"), ("use_dam", "dam"), ("use_mcpm", "mcpm"))
             if ablation[flag]]
    return "+".join(parts) if parts else "scratch"


def stage_seed(seed: int, stage: str) -> int:
    """Independent per-stage seed derived from the global seed and a stage name."""
    key = [seed] + [ord(c) for c in stage]
    return int(np.random.SeedSequence(key).generate_state(1, np.uint32)[0])


def save_config(cfg: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
