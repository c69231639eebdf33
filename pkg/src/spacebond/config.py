"""Pipeline configuration: defaults, validation, merging, seed fan-out.

Configs are declarative JSON; every default is resolved up front and the
effective config is echoed into the output directory, so a run is fully
described by that one file plus the package version.

Seed scheme: one global seed fans out to per-stage streams through
``SeedSequence([seed, STAGE, ...])`` with the stage tags below, so stages
can be rerun independently yet reproducibly.  The ``SPACEBOND_SEED``
environment variable overrides the config seed.
"""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import numpy as np

# Stage tags for seed fan-out.
STAGE_WORLD = 0
STAGE_SPACE = 1  # + per-space index
STAGE_BOND = 2   # + per-bond index

PRODUCTS = ("displacement", "combination", "full")

DEFAULT_CONFIG = {
    "seed": 7,
    "synth": {
        "n_items": 2000,
        "latent_dim": 64,
        "eval_count": 400,
        "frame_jitter": 1.5,
        "spaces": {
            "unified": {
                "dim": 96,
                "noise": {"audio": 3.5, "image": 1.35, "text": 1.35},
                "shared_shift": 0.0,
            },
            "vt_expert": {
                "dim": 64,
                "noise": {"image": 1.05, "text": 1.05},
                "shared_shift": 0.0,
            },
            "at_experts": [
                {
                    "name": "at_expert",
                    "dim": 80,
                    "noise": {"audio": 0.8, "text": 2.1},
                    "shared_shift": 0.7,
                }
            ],
        },
    },
    "bond": {
        "temperature": 0.01,
        "pool_size": None,
        "batch_size": 256,
        "anchors": ["text", "image", "audio"],
    },
    "train": {
        "lr": 1e-3,
        "epochs": None,
        "epochs_displacement": 5,
        "epochs_combination": 20,
        "batch_size": 256,
        "tau_infonce": 0.02,
        "hidden": 128,
        "seed": None,
    },
    "products": ["displacement", "combination"],
    "factors": {
        "preset": "versatile",
        "lambda_v": 0.9,
        "lambda_t": 0.9,
        "sigma_a": None,
        "sigma_t": None,
    },
    "eval": {"ks": [1, 5]},
    "sweep": {"grid": [0.0, 0.2, 0.4, 0.6, 0.8], "product": "combination"},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Resolve defaults, user file, explicit overrides, and the seed env var."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(Path(path), "r", encoding="utf-8") as f:
                user = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    env_seed = os.environ.get("SPACEBOND_SEED")
    if env_seed is not None:
        cfg["seed"] = int(env_seed)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg.get("seed"), int):
        raise ConfigError("seed must be an integer (no implicit nondeterminism)")
    synth = cfg["synth"]
    if synth["eval_count"] >= synth["n_items"]:
        raise ConfigError("eval_count must leave items for training")
    for product in cfg["products"]:
        if product not in PRODUCTS:
            raise ConfigError(f"unknown product {product!r}, have {PRODUCTS}")
    for knob in ("temperature",):
        if cfg["bond"][knob] <= 0:
            raise ConfigError(f"bond.{knob} must be positive")
    train = cfg["train"]
    if train["lr"] <= 0 or train["tau_infonce"] <= 0 or train["batch_size"] <= 0:
        raise ConfigError("train.lr, train.tau_infonce, train.batch_size must be positive")
    grid = cfg["sweep"]["grid"]
    if not grid or any(not 0.0 <= g <= 1.0 for g in grid):
        raise ConfigError("sweep.grid values must lie in [0, 1]")
    factors = cfg["factors"]
    for name in ("lambda_v", "lambda_t"):
        if not 0.0 <= factors[name] <= 1.0:
            raise ConfigError(f"factors.{name} outside [0, 1]")
    for name in ("sigma_a", "sigma_t"):
        if factors[name] is not None and not 0.0 <= factors[name] <= 1.0:
            raise ConfigError(f"factors.{name} outside [0, 1]")


def stage_seed(seed: int, *tags: int) -> int:
    """Derive one stage seed from the global seed and integer tags."""
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def epochs_for(cfg: dict, kind: str) -> int:
    train = cfg["train"]
    if train["epochs"] is not None:
        return int(train["epochs"])
    return int(train[f"epochs_{kind}"])


def train_seed_for(cfg: dict, bond_index: int) -> int:
    train = cfg["train"]
    if train["seed"] is not None:
        return int(train["seed"]) + bond_index
    return stage_seed(cfg["seed"], STAGE_BOND, bond_index)


def write_effective_config(cfg: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "effective_config.json", "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
