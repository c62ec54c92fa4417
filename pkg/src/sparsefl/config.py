"""Run configuration files, presets, and dataset resolution.

A config file is a flat JSON object. Keys are the :class:`RunConfig` fields
plus the dataset keys below; anything else is rejected.

dataset        ``"synthetic"`` or ``"mnist"``
data_dir       directory holding the four standard MNIST IDX files (``.gz`` ok)
train_images, train_labels, test_images, test_labels
               explicit IDX paths, overriding ``data_dir``
synth_classes, synth_per_class, synth_test_per_class, synth_features
               synthetic blob sizes
target_fraction
               accuracy fraction used by the cost report (default 0.95)
"""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path
from typing import Any

from .data import Dataset, load_idx, synth_dataset
from .errors import ConfigError
from .federation import RunConfig, hash_seed

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

DATA_DEFAULTS: dict[str, Any] = {
    "dataset": "synthetic",
    "data_dir": None,
    "train_images": None,
    "train_labels": None,
    "test_images": None,
    "test_labels": None,
    "synth_classes": 10,
    "synth_per_class": 100,
    "synth_test_per_class": 50,
    "synth_features": 20,
    "target_fraction": 0.95,
}

RUN_KEYS = {f.name for f in fields(RunConfig)}
ALL_KEYS = RUN_KEYS | set(DATA_DEFAULTS)

_SYNTH_DESK = {"dataset": "synthetic", "num_clients": 20, "clients_per_round": 5,
               "hidden": [16], "learning_rate": 0.1, "batch_size": 50}
_MNIST = {"dataset": "mnist", "num_clients": 100, "clients_per_round": 10,
          "local_iterations": 5, "batch_size": 50, "learning_rate": 0.3,
          "hidden": [200], "rounds": 100}


def _fig1(s: float | None) -> dict:
    if s is None:
        return {**_MNIST, "pipeline": "fedavg", "partition": "iid"}
    return {**_MNIST, "pipeline": "thgs", "partition": "iid",
            "s_0": s, "alpha": 0.8, "s_min": min(0.01, s)}


def _build_presets() -> dict[str, dict]:
    presets = {
        "smoke": {**_SYNTH_DESK, "rounds": 20, "pipeline": "thgs",
                  "s_0": 0.1, "alpha": 0.5, "s_min": 0.01},
        "desk": {**_SYNTH_DESK, "rounds": 50, "pipeline": "fedavg"},
        "desk-secagg": {**_SYNTH_DESK, "rounds": 50, "pipeline": "secagg"},
        "fig1-fedavg": _fig1(None),
        "fig1-s01": _fig1(0.1),
        "fig1-s001": _fig1(0.01),
        "fig1-s0001": _fig1(0.001),
    }
    for n in (4, 6, 8):
        noniid = {**_MNIST, "partition": f"noniid({n})"}
        presets[f"fig2-n{n}-fedavg"] = {**noniid, "pipeline": "fedavg"}
        presets[f"fig2-n{n}-s0001"] = {**noniid, "pipeline": "thgs",
                                       "s_0": 0.001, "alpha": 1.0, "s_min": 0.001}
        presets[f"fig3-n{n}-fedavg"] = {**noniid, "pipeline": "fedavg"}
        presets[f"fig3-n{n}-flat"] = {**noniid, "pipeline": "flat", "s": 0.01}
        for a in (0.2, 0.5, 0.8):
            presets[f"fig3-n{n}-a{str(a).replace('.', '')}"] = {
                **noniid, "pipeline": "thgs", "s_0": 0.1, "alpha": a, "s_min": 0.01}
        presets[f"fig3-n{n}-secagg"] = {**noniid, "pipeline": "secagg"}
    return presets


PRESETS = _build_presets()
FULL_ROUNDS = 1000


def check_keys(doc: dict, where: str = "config") -> None:
    for key in doc:
        if key not in ALL_KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if "manifest_version" in doc:
        doc = doc["config"]
    check_keys(doc, str(path))
    return doc


def resolve(preset: str | None = None, file_doc: dict | None = None,
            overrides: dict | None = None) -> dict:
    """Merge defaults < preset < config file < overrides and validate."""
    doc: dict[str, Any] = {**RunConfig().to_dict(), **DATA_DEFAULTS}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}")
        doc.update(PRESETS[preset])
    for layer, where in ((file_doc, "config"), (overrides, "override")):
        if layer:
            check_keys(layer, where)
            doc.update(layer)
    run_config(doc)
    if doc["dataset"] not in ("synthetic", "mnist"):
        raise ConfigError(f"dataset: must be 'synthetic' or 'mnist', got {doc['dataset']!r}")
    if not 0 < float(doc["target_fraction"]) <= 1:
        raise ConfigError("target_fraction: must lie in (0, 1]")
    return doc


def run_config(doc: dict) -> RunConfig:
    kwargs = {k: doc[k] for k in RUN_KEYS if k in doc}
    try:
        cfg = RunConfig(**kwargs)
        cfg.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value: {exc}") from None
    return cfg


def dataset_paths(doc: dict) -> dict[str, Path]:
    paths = {}
    for key, default_name in MNIST_FILES.items():
        if doc.get(key):
            p = Path(doc[key])
        elif doc.get("data_dir"):
            p = Path(doc["data_dir"]) / default_name
            if not p.exists() and p.with_name(p.name + ".gz").exists():
                p = p.with_name(p.name + ".gz")
        else:
            raise ConfigError(f"{key}: missing dataset path (set data_dir or {key})")
        if not p.exists():
            raise ConfigError(f"{key}: dataset file {p} does not exist")
        paths[key] = p
    return paths


def load_datasets(doc: dict) -> tuple[Dataset, Dataset]:
    if doc["dataset"] == "mnist":
        p = dataset_paths(doc)
        return (load_idx(p["train_images"], p["train_labels"]),
                load_idx(p["test_images"], p["test_labels"]))
    seed = hash_seed(int(doc["seed"]), 100)
    c, d = int(doc["synth_classes"]), int(doc["synth_features"])
    train = synth_dataset(c, int(doc["synth_per_class"]), d, seed)
    test = synth_dataset(c, int(doc["synth_test_per_class"]), d, seed, sample_seed=1)
    return train, test
