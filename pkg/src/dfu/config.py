"""Run configuration: schema, defaults, hashing, and object builders.

A run is a pure function of its config. Files are JSON with ordered keys;
any key starting with "_" is treated as a comment and ignored (stripped
before hashing, so commenting a config does not change its identity).

Seed discipline: everything derives deterministically from master_seed --
dataset generation, partitioning, batch streams, request sampling and the
noise draws each get a fixed offset, so two runs of the same config are
bit-identical.
"""

from __future__ import annotations

import copy
import hashlib
import json

import numpy as np

from . import data as data_mod
from .data import Dataset, preprocess
from .dpsgd import TrainConfig
from .models import LossModel
from .topology import MixingMatrix, build_mixing

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "load_config",
    "merge_config",
    "config_hash",
    "canonical_json",
    "build_dataset",
    "build_loss_model",
    "build_partition",
    "build_topology",
    "build_train_config",
    "request_spec",
    "SEED_OFFSETS",
]

SEED_OFFSETS = {"dataset": 0, "partition": 1, "train": 2, "noise": 3, "request": 4}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


DEFAULTS: dict = {
    "master_seed": 1,
    "topology": {"kind": "ring", "n": 10, "p": 0.5, "seed": 7},
    "dataset": {
        "kind": "digits",  # digits | synth_blobs | csv | idx
        "train_size": 2000,
        "test_size": 1000,
        "pixel_noise": 0.01,
        # synth_blobs parameters
        "dim": 10,
        "classes": 2,
        # csv/idx paths
        "path": None,
        "test_path": None,
        "image_path": None,
        "label_path": None,
        "test_image_path": None,
        "test_label_path": None,
        "has_header": False,
        # preprocessing (fit on train, applied to both splits)
        "standardize": True,
        "add_bias": True,
        "unit_ball": True,
    },
    "partition": {"mode": "iid", "alpha": 0.3, "seed": None},
    "model": {"kind": "regularized_logistic", "lambda_reg": 32.0},
    "train": {
        "rounds": 3000,
        "lr": 0.001,
        "batch_size": 100,
        "metrics_every": 100,
    },
    "unlearn": {
        "granularity": "samples",  # samples | class | client
        "fraction": 0.1,
        "class_label": 0,
        "client": 0,
        "epsilon": 1.0,
        "delta": 0.05,
        "stat_mode": "exact_hessian",  # exact_hessian | fisher
        "finetune_rounds": 1,
        "capacity_fraction": 0.25,
        "no_noise": False,
    },
}


def _strip_comments(obj):
    if isinstance(obj, dict):
        return {k: _strip_comments(v) for k, v in obj.items() if not k.startswith("_")}
    if isinstance(obj, list):
        return [_strip_comments(v) for v in obj]
    return obj


def merge_config(overrides: dict) -> dict:
    """Deep-merge user overrides onto the full default set."""
    cfg = copy.deepcopy(DEFAULTS)

    def rec(dst, src, path):
        for k, v in src.items():
            if k not in dst:
                raise ConfigError(f"unknown config key: {'.'.join(path + [k])}")
            if isinstance(dst[k], dict) and isinstance(v, dict):
                rec(dst[k], v, path + [k])
            else:
                dst[k] = v

    rec(cfg, _strip_comments(overrides), [])
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return merge_config(raw)


def canonical_json(cfg: dict) -> str:
    return json.dumps(_strip_comments(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:12]


def train_fingerprint(cfg: dict) -> str:
    """Hash over the keys that determine the training trajectory.

    Unlearn-stage knobs (epsilon, stat mode, ...) do not enter, so trained
    checkpoints stay valid when only the removal settings change.
    """
    subset = {k: cfg[k] for k in ("master_seed", "topology", "dataset", "partition",
                                  "model", "train")}
    return hashlib.sha256(canonical_json(subset).encode()).hexdigest()[:12]


# --- builders ----------------------------------------------------------------------


def _seed(cfg: dict, stage: str) -> int:
    return int(cfg["master_seed"]) * 16 + SEED_OFFSETS[stage]


def build_dataset(cfg: dict) -> tuple[Dataset, Dataset]:
    d = cfg["dataset"]
    kind = d["kind"]
    seed = _seed(cfg, "dataset")
    if kind == "digits":
        train, test = data_mod.digits_dataset(
            train_size=int(d["train_size"]),
            test_size=int(d["test_size"]),
            seed=seed,
            pixel_noise=float(d["pixel_noise"]),
        )
    elif kind == "synth_blobs":
        total = int(d["train_size"]) + int(d["test_size"])
        full = data_mod.synth_blobs(total, int(d["dim"]), int(d["classes"]), seed)
        cut = int(d["train_size"])
        train = Dataset(full.features[:cut].copy(), full.labels[:cut].copy())
        test = Dataset(full.features[cut:].copy(), full.labels[cut:].copy())
    elif kind == "csv":
        if not d["path"] or not d["test_path"]:
            raise ConfigError("csv dataset needs dataset.path and dataset.test_path")
        train = data_mod.load_csv(d["path"], has_header=bool(d["has_header"]))
        test = data_mod.load_csv(d["test_path"], has_header=bool(d["has_header"]))
    elif kind == "idx":
        for key in ("image_path", "label_path", "test_image_path", "test_label_path"):
            if not d[key]:
                raise ConfigError(f"idx dataset needs dataset.{key}")
        train = data_mod.load_idx(d["image_path"], d["label_path"])
        test = data_mod.load_idx(d["test_image_path"], d["test_label_path"])
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    return preprocess(
        train,
        test,
        standardize=bool(d["standardize"]),
        add_bias=bool(d["add_bias"]),
        unit_ball=bool(d["unit_ball"]),
    )


def build_loss_model(cfg: dict, train: Dataset) -> LossModel:
    m = cfg["model"]
    if m["kind"] not in ("regularized_logistic", "least_squares"):
        raise ConfigError(f"unknown model kind {m['kind']!r}")
    n_classes = train.n_classes if m["kind"] == "regularized_logistic" else 2
    model = LossModel(
        kind=m["kind"],
        n_features=train.dim,
        n_classes=n_classes,
        lambda_reg=float(m["lambda_reg"]),
        feature_bound=train.feature_bound,
    )
    if m["kind"] == "least_squares":
        model.label_bound = float(np.abs(train.labels).max())
    return model


def build_partition(cfg: dict, train: Dataset):
    p = cfg["partition"]
    seed = _seed(cfg, "partition") if p["seed"] is None else int(p["seed"])
    return data_mod.partition(
        train,
        int(cfg["topology"]["n"]),
        p["mode"],
        seed,
        alpha=float(p["alpha"]),
    )


def build_topology(cfg: dict, n_override: int | None = None) -> MixingMatrix:
    spec = dict(cfg["topology"])
    if n_override is not None:
        spec["n"] = n_override
    return build_mixing(spec)


def build_train_config(cfg: dict, stat_mode: str | None = None) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        rounds=int(t["rounds"]),
        lr=float(t["lr"]),
        batch_size=int(t["batch_size"]),
        seed=_seed(cfg, "train"),
        stat_mode=stat_mode or cfg["unlearn"]["stat_mode"],
        metrics_every=int(t["metrics_every"]),
    )


def request_spec(cfg: dict) -> dict:
    u = cfg["unlearn"]
    spec = {
        "granularity": u["granularity"],
        "epsilon": float(u["epsilon"]),
        "delta": float(u["delta"]),
        "seed": _seed(cfg, "request"),
    }
    if u["granularity"] == "samples":
        spec["fraction"] = float(u["fraction"])
    elif u["granularity"] == "class":
        spec["class_label"] = int(u["class_label"])
    elif u["granularity"] == "client":
        spec["client"] = int(u["client"])
    else:
        raise ConfigError(f"unknown granularity {u['granularity']!r}")
    return spec
