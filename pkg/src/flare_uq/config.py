"""Versioned JSON run configuration with per-dataset presets.

Unknown keys are rejected at every level so typos cannot silently fall
back to defaults.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .datasets import DEFAULTS, DIMS
from .errors import SchemaError

CONFIG_VERSION = 1
KEEP_FRACTIONS = [0.01, 0.05, 0.10, 0.30, 0.50]

BASE = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "dataset": {"name": "sine", "overrides": {}, "standardize": False},
    "model": {"hidden": 32, "n_blocks": 2, "time_embed_dim": 32},
    "schedule": {"kind": "cosine", "T": 600},
    "train": {
        "lr": 5e-4,
        "adam_betas": [0.9, 0.999],
        "weight_decay": 1e-4,
        "batch": 512,
        "steps": 20000,
        "grad_clip": 1.0,
        "ema_decay": 0.999,
        "snr_weighting": False,
    },
    "estimator": {
        "kind": "flare",
        "m": None,
        "damping": 1e-6,
        "n_pairs": 512,
        "scale": None,
        "S": 32,
        "dense_limit": 4096,
        "resample_per_sample": False,
    },
    "sampler": "ddpm",
    "score": {"n_samples": 2000, "stride": 0, "chunk": 256},
    "filter_percentile": 50.0,
    "eval": {
        "B": 1000,
        "disc_steps": 10000,
        "disc_width": 64,
        "S": 128,
        "n_paths": 20,
        "thresholds": [0.005, 0.01],
        "cross_term_damping": 1e-4,
    },
    "ablate": {"fractions": KEEP_FRACTIONS, "n_samples": 64},
    "output_dir": "out",
}

PRESETS = {
    "grid": {
        "dataset": {"name": "grid"},
        "schedule": {"T": 800},
        "train": {"lr": 5e-6, "batch": 256, "steps": 30000},
        "filter_percentile": 50.0,
    },
    "sine": {
        "dataset": {"name": "sine"},
        "schedule": {"T": 600},
        "train": {"lr": 5e-4, "batch": 512, "steps": 20000},
        "filter_percentile": 50.0,
    },
    "chirp": {
        "dataset": {"name": "chirp"},
        "model": {"hidden": 128},
        "schedule": {"T": 600},
        "train": {"lr": 5e-4, "batch": 256, "steps": 40000},
        "estimator": {"m": 4412},
        "filter_percentile": 25.0,
    },
    "damped": {
        "dataset": {"name": "damped"},
        "model": {"hidden": 128},
        "schedule": {"T": 600},
        "train": {"lr": 5e-4, "batch": 256, "steps": 40000},
        "estimator": {"m": 4412},
        "filter_percentile": 25.0,
    },
}

ESTIMATOR_KINDS = ("flare", "llla", "full", "bayesdiff")
SAMPLER_KINDS = ("ddpm", "ddim", "mean")


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise SchemaError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and k != "overrides":
            if not isinstance(v, dict):
                raise SchemaError(f"config key {where!r} must be an object")
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: dict) -> dict:
    if cfg.get("version") != CONFIG_VERSION:
        raise SchemaError(f"unsupported config version {cfg.get('version')!r}")
    if not isinstance(cfg.get("seed"), int) or cfg["seed"] < 0:
        raise SchemaError("seed must be a non-negative integer")
    name = cfg["dataset"]["name"]
    if name not in DIMS:
        raise SchemaError(f"unknown dataset {name!r}")
    bad = set(cfg["dataset"]["overrides"]) - set(DEFAULTS[name])
    if bad:
        raise SchemaError(f"unknown {name} generator overrides {sorted(bad)}")
    if cfg["estimator"]["kind"] not in ESTIMATOR_KINDS:
        raise SchemaError(f"estimator.kind must be one of {ESTIMATOR_KINDS}")
    if cfg["sampler"] not in SAMPLER_KINDS:
        raise SchemaError(f"sampler must be one of {SAMPLER_KINDS}")
    if not 0 < cfg["filter_percentile"] <= 100:
        raise SchemaError("filter_percentile must lie in (0, 100]")
    if cfg["schedule"]["kind"] not in ("cosine", "linear") or cfg["schedule"]["T"] < 2:
        raise SchemaError("schedule needs kind cosine|linear and T >= 2")
    return cfg


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise SchemaError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return validate(_merge(BASE, PRESETS[name]))


def from_dict(raw: dict) -> dict:
    """Overlay ``raw`` on its preset (``raw["preset"]``) or on the base config."""
    raw = dict(raw)
    name = raw.pop("preset", None)
    start = preset(name) if name else copy.deepcopy(BASE)
    return validate(_merge(start, raw))


def load(spec: str) -> dict:
    """``spec`` is a JSON file path or ``preset:<name>``."""
    if spec.startswith("preset:"):
        return preset(spec.split(":", 1)[1])
    path = Path(spec)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise SchemaError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: config must be a JSON object")
    return from_dict(raw)


def data_dim(cfg: dict) -> int:
    return DIMS[cfg["dataset"]["name"]]


def default_m(cfg: dict, p: int) -> int:
    m = cfg["estimator"]["m"]
    return int(m) if m is not None else max(1, p // 2)


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"
