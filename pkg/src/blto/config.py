"""Experiment configuration: YAML files with dotted-path overrides, strict
validation, and content hashing for stage reuse."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any

import yaml

from .attack import ABLATION_MODES, BltoConfig, ablation_mode
from .augment import CIFAR10_MEAN, CIFAR10_STD, SYNTHETIC_MEAN, SYNTHETIC_STD
from .data import (
    LabeledImageSet,
    load_cifar10,
    load_image_dir,
    make_synthetic_set,
    reference_count_for_rate,
    split_reference,
)
from .objectives import CL_METHODS, ClObjectiveConfig
from .poisoning import ATTACK_KINDS
from .utils import derive_seed
from .victim import VictimConfig

DATA_ROOT_ENV = "BLTO_DATA_ROOT"


class ConfigError(ValueError):
    """Configuration problem, reported with the offending field path."""


DEFAULTS: dict[str, Any] = {
    "run": {
        "name": "experiment",
        "output_dir": "runs/experiment",
        "seed": 0,
    },
    "dataset": {
        "kind": "synthetic",  # synthetic | cifar10 | image_dir
        "root": None,
        "num_classes": 4,
        "per_class": 200,
        "test_per_class": 50,
        "image_size": 32,
        "target_class": 0,
        "poisoning_rate": 0.05,
        "reference_count": None,  # overrides poisoning_rate when set
    },
    "attack": {
        "kind": "blto",  # blto | patch | none
        "epsilon": 8 / 255,
        "blto": {
            "outer_iterations": 200,
            "inner_steps": 5,
            "outer_steps": 5,
            "inner_lr": 0.03,
            "outer_lr": 1e-3,
            "reinit_every": 20,
            "batch_size": 64,
            "arch_tag": "tiny-conv",
            "embed_dim": 64,
            "generator_arch": "desk",
            "surrogate_method": "simsiam",
            "temperature": 0.2,
            "mode": "full",  # full | no_inner | no_outer
        },
        "patch": {"size": 5},
    },
    "victim": {
        "methods": ["simclr"],
        "arch_tag": "tiny-conv",
        "embed_dim": 64,
        "epochs": 100,
        "batch_size": 64,
        "base_lr": 0.06,
        "final_lr": 0.0,
        "include_blur": False,
        "temperature": 0.2,
        "ema_momentum": 0.99,
    },
    "evaluation": {
        "knn_k": 200,
        "knn_temperature": 0.1,
        "per_class_cap": 512,
        "monitor_cap": 512,
        "trigger_checkpoint": None,  # evaluate other runs under this trigger
    },
}

_ENUMS = {
    "dataset.kind": ("synthetic", "cifar10", "image_dir"),
    "attack.kind": ATTACK_KINDS,
    "attack.blto.mode": ABLATION_MODES,
    "attack.blto.surrogate_method": CL_METHODS,
}


def _merge(base: dict, overlay: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{here}: unknown configuration key")
        if isinstance(base[key], dict) and key != "root":
            if not isinstance(value, dict):
                raise ConfigError(f"{here}: expected a mapping")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def _apply_override(cfg: dict, dotted: str) -> None:
    if "=" not in dotted:
        raise ConfigError(f"override {dotted!r} must look like section.key=value")
    key_path, raw = dotted.split("=", 1)
    value = yaml.safe_load(raw)
    node = cfg
    parts = key_path.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"{key_path}: unknown configuration key")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"{key_path}: unknown configuration key")
    node[parts[-1]] = value


def validate_config(cfg: dict) -> None:
    for path, allowed in _ENUMS.items():
        node = cfg
        for part in path.split("."):
            node = node[part]
        if node not in allowed:
            raise ConfigError(f"{path}: must be one of {list(allowed)}, got {node!r}")
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        if ds["num_classes"] < 2:
            raise ConfigError("dataset.num_classes: must be >= 2")
        if ds["image_size"] < 8:
            raise ConfigError("dataset.image_size: must be >= 8")
    if not 0.0 <= ds["poisoning_rate"] <= 1.0:
        raise ConfigError("dataset.poisoning_rate: must be in [0, 1]")
    eps = cfg["attack"]["epsilon"]
    if not 0.0 < eps <= 1.0:
        raise ConfigError("attack.epsilon: must be in (0, 1]")
    victim = cfg["victim"]
    if not victim["methods"]:
        raise ConfigError("victim.methods: must list at least one CL method")
    for method in victim["methods"]:
        if method not in CL_METHODS:
            raise ConfigError(f"victim.methods: {method!r} is not one of {list(CL_METHODS)}")
    if victim["epochs"] < 1:
        raise ConfigError("victim.epochs: must be >= 1")
    if cfg["evaluation"]["knn_k"] < 1:
        raise ConfigError("evaluation.knn_k: must be >= 1")


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> dict:
    """Resolved configuration: defaults <- file <- dotted overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        file_path = Path(path)
        if not file_path.is_file():
            raise ConfigError(f"config file not found: {file_path}")
        loaded = yaml.safe_load(file_path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{file_path}: top level must be a mapping")
        cfg = _merge(cfg, loaded)
    for dotted in overrides or []:
        _apply_override(cfg, dotted)
    validate_config(cfg)
    return cfg


def _raw_hash(tree) -> str:
    return hashlib.sha256(json.dumps(tree, sort_keys=True, default=str).encode()).hexdigest()


def config_hash(cfg: dict) -> str:
    """Stable content hash; the output location is not part of run identity."""
    pruned = copy.deepcopy(cfg)
    if isinstance(pruned, dict) and "run" in pruned:
        pruned["run"] = {k: v for k, v in pruned["run"].items() if k != "output_dir"}
    return _raw_hash(pruned)


def stage_hash(cfg: dict, stage: str) -> str:
    """Hash of exactly the inputs a stage's output depends on."""
    sections = {
        "trigger": ["dataset", "attack"],
        "poison": ["dataset", "attack"],
        "victim": ["dataset", "attack", "victim"],
    }[stage]
    tree = {name: cfg[name] for name in sections}
    tree["seed"] = cfg["run"]["seed"]
    return _raw_hash(tree)[:12]


def dataset_norm(cfg: dict) -> tuple[tuple[float, ...], tuple[float, ...]]:
    if cfg["dataset"]["kind"] == "cifar10":
        return CIFAR10_MEAN, CIFAR10_STD
    return SYNTHETIC_MEAN, SYNTHETIC_STD


def _dataset_root(cfg: dict) -> Path:
    root = cfg["dataset"]["root"] or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(
            f"dataset.root: not set and {DATA_ROOT_ENV} is undefined "
            f"(required for dataset.kind={cfg['dataset']['kind']!r})"
        )
    return Path(root)


def build_datasets(cfg: dict) -> tuple[LabeledImageSet, LabeledImageSet]:
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        seed = cfg["run"]["seed"]
        train = make_synthetic_set(
            ds["num_classes"], ds["per_class"], ds["image_size"],
            seed=derive_seed(seed, "data-train"),
        )
        test = make_synthetic_set(
            ds["num_classes"], ds["test_per_class"], ds["image_size"],
            seed=derive_seed(seed, "data-test"), split_tag="test",
        )
        return train, test
    if ds["kind"] == "cifar10":
        root = _dataset_root(cfg)
        return load_cifar10(root, "train"), load_cifar10(root, "test")
    root = _dataset_root(cfg)
    return (
        load_image_dir(root / "train", split_tag="train"),
        load_image_dir(root / "test", split_tag="test"),
    )


def build_split(cfg: dict, train: LabeledImageSet):
    ds = cfg["dataset"]
    count = ds["reference_count"]
    if count is None:
        count = reference_count_for_rate(ds["poisoning_rate"], len(train))
    return split_reference(train, ds["target_class"], count)


def build_blto_config(cfg: dict) -> BltoConfig:
    a = cfg["attack"]["blto"]
    inner = ClObjectiveConfig(method=a["surrogate_method"], temperature=a["temperature"])
    built = BltoConfig(
        outer_iterations=a["outer_iterations"],
        inner_steps=a["inner_steps"],
        outer_steps=a["outer_steps"],
        inner_lr=a["inner_lr"],
        outer_lr=a["outer_lr"],
        reinit_every=a["reinit_every"],
        inner_method=inner,
        batch_size=a["batch_size"],
        epsilon=cfg["attack"]["epsilon"],
        seed=derive_seed(cfg["run"]["seed"], "attack"),
        arch_tag=a["arch_tag"],
        embed_dim=a["embed_dim"],
        generator_arch=a["generator_arch"],
    )
    return ablation_mode(built, a["mode"])


def build_victim_config(cfg: dict, method: str) -> VictimConfig:
    v = cfg["victim"]
    return VictimConfig(
        method=method,
        arch_tag=v["arch_tag"],
        embed_dim=v["embed_dim"],
        epochs=v["epochs"],
        batch_size=v["batch_size"],
        base_lr=v["base_lr"],
        final_lr=v["final_lr"],
        include_blur=v["include_blur"],
        temperature=v["temperature"],
        ema_momentum=v["ema_momentum"],
        seed=derive_seed(cfg["run"]["seed"], "victim", method),
    )


def write_lock(cfg: dict, out_dir: str | Path) -> str:
    """Record the resolved config + hash; refuse to resume under a different one."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    lock_path = out / "config.lock.json"
    if lock_path.is_file():
        existing = json.loads(lock_path.read_text())
        if existing.get("config_hash") != digest:
            raise ConfigError(
                f"output directory {out} was produced by a different configuration "
                f"({existing.get('config_hash', '?')[:12]} != {digest[:12]}); "
                "refusing to mix artifacts"
            )
    else:
        lock_path.write_text(
            json.dumps({"config_hash": digest, "config": cfg}, indent=2, sort_keys=True)
        )
    return digest
