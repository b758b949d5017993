"""Run configuration: YAML or JSON in, a fully resolved dict out.

Every block except ``dataset`` is optional; missing keys take the defaults
below. Unknown keys are errors, reported with their dotted path. The
resolved config hashes to a stable id, and the single global seed fans out
to one seed per component (see :func:`component_seeds`).
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .attacks import AttackConfig, AttackConfigError
from .datasets import DataSplit, gen_blobs, gen_rings, load_table, stratified_split
from .training import REGIMES


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"config key {key!r}: {msg}")
        self.key = key


# component order is part of the seeding contract; append only
SEED_COMPONENTS = ("data", "init_target", "init_trans", "shuffle", "attack", "aux")

ATTACK_DEFAULTS = {
    "name": None, "norm": "linf", "epsilon": 0.1, "steps": 10, "step_size": None, "random_start": True,
    "mode": "nontarget", "objective": "combined", "target_label": None, "target_matrix": None,
    "dual_weights": [1.0, 1.0],
}

ATTACK_KEYS = ("attack", "sweep_attack")

DATASET_DEFAULTS = {
    "blobs": {"n_classes": 4, "dim": 2, "n_per_class": 500, "spread": 0.03, "radius": 0.15, "test_fraction": 0.2},
    "rings": {"n_per_class": 500, "noise": 0.02, "radii": [0.5, 1.0], "test_fraction": 0.2},
    "table": {"path": None, "label_column": "label", "test_fraction": 0.2},
}

DEFAULTS = {
    "seed": 0,
    "seeds": {},
    "model": {"hidden": [64, 64]},
    "attack": dict(ATTACK_DEFAULTS),
    "train": {
        "regime": "joint", "epochs": 60, "batch_size": 128, "lr": 0.1, "lr_milestones": [0.75, 0.9],
        "lr_decay": 0.1, "momentum": 0.9, "weight_decay": 2e-4, "include_failed": True, "joint_flow": False,
        "warmup_epochs": 5, "eval_every": 10, "pretrain_epochs": 60, "target_checkpoint": None,
    },
    "eval": {
        "attacks": [
            {"name": "PGD-40 combined", "epsilon": 0.1, "steps": 40, "objective": "combined"},
            {"name": "PGD-40 dual", "epsilon": 0.1, "steps": 40, "objective": "dual"},
            {"name": "PGD-40 target", "epsilon": 0.1, "steps": 40, "objective": "target_only"},
        ],
        "sweep_epsilons": [0.0, 0.05, 0.1, 0.2, 0.4],
        "sweep_attack": {"steps": 40, "objective": "combined"},
    },
    "detect": {"attack": {"epsilon": 0.1, "steps": 40, "objective": "combined"}},
    "transfer": {"target_checkpoint": None, "target_epochs": 60, "fine_tune_epochs": 20,
                 "fine_tune_regime": "man_minus"},
    "masking": {"base_eps": 0.1, "steps": 40, "n_random": 100_000, "max_robust_points": 20,
                "surrogate_epochs": 60},
}


def _merge(defaults: dict, given: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(where, f"unknown key (expected one of {sorted(defaults)})")
        if key in ATTACK_KEYS:
            # attack blocks are checked as a whole by _attack_block
            out[key] = {**defaults[key], **value} if isinstance(value, dict) else value
        elif isinstance(defaults[key], dict) and defaults[key] and key != "seeds":
            if not isinstance(value, dict):
                raise ConfigError(where, "expected a mapping")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def _attack_block(block: Any, where: str) -> dict:
    if not isinstance(block, dict):
        raise ConfigError(where, "expected a mapping of attack settings")
    resolved = _merge(ATTACK_DEFAULTS, block, where)
    try:
        cfg = to_attack(resolved)
    except (AttackConfigError, TypeError) as exc:
        raise ConfigError(where, str(exc)) from None
    out = cfg.to_dict()
    out["dual_weights"] = list(out["dual_weights"])
    return out


def resolve(raw: Optional[dict]) -> dict:
    """Expand defaults and validate; the result is plain JSON-able data."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    if "dataset" not in raw:
        raise ConfigError("dataset", "missing block (kind: blobs | rings | table)")
    ds = raw["dataset"]
    if not isinstance(ds, dict) or ds.get("kind") not in DATASET_DEFAULTS:
        raise ConfigError("dataset.kind", f"must be one of {sorted(DATASET_DEFAULTS)}")
    rest = {k: v for k, v in raw.items() if k != "dataset"}
    cfg = _merge(DEFAULTS, rest, "")
    kind = ds["kind"]
    cfg["dataset"] = {"kind": kind, **_merge(DATASET_DEFAULTS[kind], {k: v for k, v in ds.items() if k != "kind"},
                                            "dataset")}
    if kind == "table" and not cfg["dataset"]["path"]:
        raise ConfigError("dataset.path", "a table dataset needs a path")

    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    for name, value in cfg["seeds"].items():
        if name not in SEED_COMPONENTS:
            raise ConfigError(f"seeds.{name}", f"unknown component (expected one of {list(SEED_COMPONENTS)})")
        if not isinstance(value, int) or value < 0:
            raise ConfigError(f"seeds.{name}", "must be a non-negative integer")

    cfg["attack"] = _attack_block(cfg["attack"], "attack")
    if not isinstance(cfg["eval"]["attacks"], list):
        raise ConfigError("eval.attacks", "expected a list")
    cfg["eval"]["attacks"] = [_attack_block(a, f"eval.attacks[{i}]") for i, a in enumerate(cfg["eval"]["attacks"])]
    cfg["eval"]["sweep_attack"] = _attack_block(cfg["eval"]["sweep_attack"], "eval.sweep_attack")
    cfg["detect"]["attack"] = _attack_block(cfg["detect"]["attack"], "detect.attack")

    if cfg["train"]["regime"] not in REGIMES:
        raise ConfigError("train.regime", f"must be one of {list(REGIMES)}")
    for key in ("epochs", "batch_size", "warmup_epochs", "eval_every", "pretrain_epochs"):
        if not isinstance(cfg["train"][key], int) or cfg["train"][key] < 0:
            raise ConfigError(f"train.{key}", "must be a non-negative integer")
    if cfg["train"]["batch_size"] < 1:
        raise ConfigError("train.batch_size", "must be >= 1")
    if cfg["transfer"]["fine_tune_regime"] not in ("man_minus", "frozen_target"):
        raise ConfigError("transfer.fine_tune_regime", "must be 'man_minus' (adaptive) or 'frozen_target' (general)")
    hidden = cfg["model"]["hidden"]
    if not isinstance(hidden, list) or not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError("model.hidden", "must be a list of positive layer widths")
    return cfg


def load(path) -> dict:
    """Read YAML (JSON is a subset) and resolve it."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"{path}: {exc}") from None
    return resolve(raw if raw is not None else {})


def dump(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False))


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def component_seeds(cfg: dict) -> dict:
    """Seed per component: ``SeedSequence([seed, index])``, unless pinned under ``seeds``.

    Each component's seed depends only on the global seed and its own index,
    so pinning one (say ``attack``) leaves every other stream unchanged.
    """
    out = {}
    for i, name in enumerate(SEED_COMPONENTS):
        pinned = cfg["seeds"].get(name)
        out[name] = int(pinned) if pinned is not None else int(
            np.random.SeedSequence([cfg["seed"], i]).generate_state(1)[0])
    return out


def to_attack(block: dict) -> AttackConfig:
    kw = dict(block)
    if kw.get("target_matrix") is not None:
        kw["target_matrix"] = np.asarray(kw["target_matrix"], dtype=np.float64)
    kw["dual_weights"] = tuple(kw.get("dual_weights", (1.0, 1.0)))
    return AttackConfig(**kw)


def build_dataset(cfg: dict, seed: int) -> DataSplit:
    ds = dict(cfg["dataset"])
    kind = ds.pop("kind")
    try:
        if kind == "blobs":
            return gen_blobs(seed=seed, **ds)
        if kind == "rings":
            ds["radii"] = tuple(ds["radii"])
            return gen_rings(seed=seed, **ds)
        data = load_table(ds["path"], ds["label_column"])
        return stratified_split(data, ds["test_fraction"], seed)
    except TypeError as exc:
        raise ConfigError("dataset", str(exc)) from None
