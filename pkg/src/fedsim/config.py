"""JSON run configuration: defaults, validation, normalization.

A config file is a JSON object whose keys must come from the schema
below; unknown keys are rejected in one pass that names every offender.
Missing keys take defaults, so the normalized form is complete and can
be echoed into a run manifest. A manifest itself is accepted anywhere a
config is (its "config" entry is used), which makes reruns exact.
"""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

from .data import ClientDataset, Partition, PartitionSpec, dirichlet_partition, generate_blobs, load_idx
from .engine import (
    TAG_DATASET,
    TAG_PARTITION,
    ExperimentConfig,
    substream_int,
)
from .errors import ConfigError
from .estimator import EstimatorConfig
from .nn import OPTIMIZERS, TrainConfig
from .selector import SELECTOR_KINDS

# temperatures used when the config leaves the estimator temperature unset
DEFAULT_TEMPERATURE = {"sgd": 0.0025, "sgd_momentum": 0.0025, "adam": 0.0015}

DEFAULT_CONFIG: dict = {
    "run_name": "run",
    "num_clients": 50,
    "clients_per_round": 5,
    "total_rounds": 200,
    "eval_every": 5,
    "seeds": [0],
    "hidden_widths": [64],
    "hm_beta": 1.0,
    "selector": {
        "kind": "hics",
        "gamma0": 4.0,
        "powd_num_candidates": None,
    },
    "train": {
        "learning_rate": 0.02,
        "local_epochs": 2,
        "batch_size": 32,
        "optimizer": "sgd",
        "momentum": 0.9,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "prox_mu": 0.0,
        "lr_decay_every": None,
        "lr_decay_factor": 0.5,
    },
    "estimator": {"temperature": None},
    "cluster": {"mix_weight": 0.1, "num_clusters": None},
    "dataset": {
        "kind": "blobs",
        "num_classes": 10,
        "per_class_n": 400,
        "dim": 32,
        "spread": 3.0,
        "test_fraction": 0.2,
        "images": None,
        "labels": None,
        "test_images": None,
        "test_labels": None,
    },
    "partition": {"alphas": [0.001, 0.002, 0.005, 0.01, 0.5]},
    "assumption": {"probe_every": 5, "coverage_target": 0.9},
}


def _collect_unknown(user: dict, defaults: dict, prefix: str, unknown: list[str]) -> None:
    for key, value in user.items():
        if key not in defaults:
            unknown.append(f"{prefix}{key}")
            continue
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                continue  # type error reported during merge
            _collect_unknown(value, defaults[key], f"{prefix}{key}.", unknown)


def _merge(user: dict, defaults: dict, prefix: str) -> dict:
    out = {}
    for key, default in defaults.items():
        if key not in user:
            out[key] = copy.deepcopy(default)
            continue
        value = user[key]
        if isinstance(default, dict) and default:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix}{key} must be an object")
            out[key] = _merge(value, default, f"{prefix}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def normalize_config(user: dict) -> dict:
    """Validate a raw config dict and fill in every default.

    Unknown keys anywhere in the tree are rejected together, each named
    by its dotted path. Manifest files (objects containing a "config"
    entry produced by a run) are unwrapped first.
    """
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    if "config" in user and isinstance(user.get("config"), dict):
        user = user["config"]
    unknown: list[str] = []
    _collect_unknown(user, DEFAULT_CONFIG, "", unknown)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
    norm = _merge(user, DEFAULT_CONFIG, "")
    _type_check(norm)
    # resolve optimizer-dependent temperature so the echo is explicit
    if norm["estimator"]["temperature"] is None:
        norm["estimator"]["temperature"] = DEFAULT_TEMPERATURE[
            norm["train"]["optimizer"]
        ]
    if norm["cluster"]["num_clusters"] is None:
        norm["cluster"]["num_clusters"] = norm["clients_per_round"]
    return norm


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _type_check(norm: dict) -> None:
    _require(isinstance(norm["run_name"], str), "run_name must be a string")
    for key in ("num_clients", "clients_per_round", "total_rounds", "eval_every"):
        _require(_is_int(norm[key]) and norm[key] >= 1, f"{key} must be a positive integer")
    _require(
        isinstance(norm["seeds"], list)
        and len(norm["seeds"]) >= 1
        and all(_is_int(s) and s >= 0 for s in norm["seeds"]),
        "seeds must be a non-empty list of non-negative integers",
    )
    _require(
        isinstance(norm["hidden_widths"], list)
        and all(_is_int(w) and w >= 1 for w in norm["hidden_widths"]),
        "hidden_widths must be a list of positive integers",
    )
    _require(_is_num(norm["hm_beta"]) and norm["hm_beta"] > 0, "hm_beta must be > 0")
    sel = norm["selector"]
    _require(sel["kind"] in SELECTOR_KINDS, f"selector.kind must be one of {SELECTOR_KINDS}")
    _require(_is_num(sel["gamma0"]), "selector.gamma0 must be a number")
    _require(
        sel["powd_num_candidates"] is None or _is_int(sel["powd_num_candidates"]),
        "selector.powd_num_candidates must be an integer or null",
    )
    tr = norm["train"]
    _require(_is_num(tr["learning_rate"]) and tr["learning_rate"] > 0, "train.learning_rate must be > 0")
    _require(_is_int(tr["local_epochs"]) and tr["local_epochs"] >= 1, "train.local_epochs must be >= 1")
    _require(_is_int(tr["batch_size"]) and tr["batch_size"] >= 1, "train.batch_size must be >= 1")
    _require(tr["optimizer"] in OPTIMIZERS, f"train.optimizer must be one of {OPTIMIZERS}")
    for key in ("momentum", "adam_beta1", "adam_beta2", "adam_eps", "prox_mu", "lr_decay_factor"):
        _require(_is_num(tr[key]), f"train.{key} must be a number")
    _require(
        tr["lr_decay_every"] is None or (_is_int(tr["lr_decay_every"]) and tr["lr_decay_every"] >= 1),
        "train.lr_decay_every must be a positive integer or null",
    )
    est = norm["estimator"]
    _require(
        est["temperature"] is None or (_is_num(est["temperature"]) and est["temperature"] > 0),
        "estimator.temperature must be > 0 or null",
    )
    cl = norm["cluster"]
    _require(_is_num(cl["mix_weight"]) and 0 <= cl["mix_weight"] <= 1, "cluster.mix_weight must be in [0, 1]")
    _require(
        cl["num_clusters"] is None or (_is_int(cl["num_clusters"]) and cl["num_clusters"] >= 1),
        "cluster.num_clusters must be a positive integer or null",
    )
    ds = norm["dataset"]
    _require(ds["kind"] in ("blobs", "idx"), "dataset.kind must be 'blobs' or 'idx'")
    if ds["kind"] == "blobs":
        _require(_is_int(ds["num_classes"]) and ds["num_classes"] >= 2, "dataset.num_classes must be >= 2")
        _require(_is_int(ds["per_class_n"]) and ds["per_class_n"] >= 1, "dataset.per_class_n must be >= 1")
        _require(_is_int(ds["dim"]) and ds["dim"] >= 1, "dataset.dim must be >= 1")
        _require(_is_num(ds["spread"]) and ds["spread"] > 0, "dataset.spread must be > 0")
        _require(
            _is_num(ds["test_fraction"]) and 0 < ds["test_fraction"] <= 1,
            "dataset.test_fraction must be in (0, 1]",
        )
    else:
        _require(
            isinstance(ds["images"], str) and isinstance(ds["labels"], str),
            "dataset.images and dataset.labels paths are required for kind 'idx'",
        )
    part = norm["partition"]
    _require(
        isinstance(part["alphas"], list)
        and len(part["alphas"]) >= 1
        and all(_is_num(a) and a > 0 for a in part["alphas"]),
        "partition.alphas must be a non-empty list of positive numbers",
    )
    asm = norm["assumption"]
    _require(_is_int(asm["probe_every"]) and asm["probe_every"] >= 1, "assumption.probe_every must be >= 1")
    _require(
        _is_num(asm["coverage_target"]) and 0 < asm["coverage_target"] <= 1,
        "assumption.coverage_target must be in (0, 1]",
    )


def load_config(path) -> dict:
    """Read and normalize a config (or manifest) JSON file."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
    return normalize_config(raw)


def to_experiment_config(norm: dict) -> ExperimentConfig:
    """Build the engine-level config from a normalized dict."""
    tr = norm["train"]
    train = TrainConfig(
        learning_rate=float(tr["learning_rate"]),
        local_epochs=int(tr["local_epochs"]),
        batch_size=int(tr["batch_size"]),
        optimizer=tr["optimizer"],
        momentum=float(tr["momentum"]),
        adam_beta1=float(tr["adam_beta1"]),
        adam_beta2=float(tr["adam_beta2"]),
        adam_eps=float(tr["adam_eps"]),
        prox_mu=float(tr["prox_mu"]),
    )
    temperature = norm["estimator"]["temperature"]
    if temperature is None:
        temperature = DEFAULT_TEMPERATURE[tr["optimizer"]]
    cfg = ExperimentConfig(
        num_clients=int(norm["num_clients"]),
        clients_per_round=int(norm["clients_per_round"]),
        total_rounds=int(norm["total_rounds"]),
        selector_kind=norm["selector"]["kind"],
        gamma0=float(norm["selector"]["gamma0"]),
        powd_num_candidates=norm["selector"]["powd_num_candidates"],
        hidden_widths=tuple(int(w) for w in norm["hidden_widths"]),
        train=train,
        estimator=EstimatorConfig(temperature=float(temperature)),
        cluster_mix_weight=float(norm["cluster"]["mix_weight"]),
        num_clusters=norm["cluster"]["num_clusters"],
        eval_every=int(norm["eval_every"]),
        hm_beta=float(norm["hm_beta"]),
        lr_decay_every=tr["lr_decay_every"],
        lr_decay_factor=float(tr["lr_decay_factor"]),
    )
    cfg.validate()
    return cfg


def build_data(norm: dict, run_seed: int) -> tuple[ClientDataset, ClientDataset | None, Partition]:
    """Materialize the pooled train set, test set, and client partition.

    Dataset and partition randomness derive from the run seed through
    fixed purpose tags, so a (config, seed) pair pins the whole run.
    """
    ds = norm["dataset"]
    if ds["kind"] == "blobs":
        train, test = generate_blobs(
            num_classes=int(ds["num_classes"]),
            per_class_n=int(ds["per_class_n"]),
            dim=int(ds["dim"]),
            spread=float(ds["spread"]),
            seed=substream_int(run_seed, TAG_DATASET),
            test_fraction=float(ds["test_fraction"]),
        )
    else:
        train = load_idx(ds["images"], ds["labels"])
        test = None
        if ds["test_images"] and ds["test_labels"]:
            test = load_idx(ds["test_images"], ds["test_labels"], train.num_classes)
    spec = PartitionSpec(
        num_clients=int(norm["num_clients"]),
        alphas=tuple(float(a) for a in norm["partition"]["alphas"]),
        seed=substream_int(run_seed, TAG_PARTITION),
    )
    partition = dirichlet_partition(train, spec)
    return train, test, partition
