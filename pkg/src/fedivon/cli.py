"""Experiment runner: validated config files, seeded runs, JSONL metrics.

``fedivon run config.yaml`` executes one experiment (standard federated
training, personalized training, OOD evaluation, or a local-epoch
ablation) and writes a manifest, a streaming metrics JSONL, a CSV
summary, and a resumable checkpoint under the output directory.
``fedivon summarize <dir>`` rebuilds the summary table from the JSONL
streams found below a directory.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from . import datagen
from .federation import (
    ClientHandle,
    EvalContext,
    FederationConfig,
    FederationResult,
    MetricsRecord,
    PersonalizationConfig,
    load_checkpoint,
    run_federation,
    save_checkpoint,
)
from .ivon import IvonConfig
from .nn import ModelSpec
from .seeding import derive_rng

MODES = ("standard", "personalized", "ood", "ablation")
GENERATORS = ("blobs", "superclass", "idx", "csv")
SCHEMES = ("shard", "class_skew", "concept_drift")

ENV_OUTPUT_DIR = "FEDIVON_OUTPUT"


class ConfigError(ValueError):
    """Raised with every config problem found, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class DataConfig:
    generator: str = "blobs"
    blobs_n_classes: int = 5
    blobs_n_per_class: int = 200
    blobs_dim: int = 8
    blobs_separation: float = 6.0
    super_n_super: int = 4
    super_n_sub_per_super: int = 3
    super_n_per_sub: int = 100
    super_dim: int = 8
    idx_train_images: Optional[str] = None
    idx_train_labels: Optional[str] = None
    idx_test_images: Optional[str] = None
    idx_test_labels: Optional[str] = None
    csv_train: Optional[str] = None
    csv_test: Optional[str] = None
    test_fraction: float = 0.25
    scheme: str = "shard"
    shards_per_client: int = 2
    classes_per_client: int = 3


@dataclass(frozen=True)
class MetricsConfig:
    mc_test_samples: int = 64
    ece_bins: int = 10
    ood_n_samples: int = 500
    ood_margin: float = 3.0


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "run"
    output_dir: str = "runs"
    seed: int = 0
    mode: str = "standard"
    ablation_epochs: tuple[int, ...] = (1, 2)
    federation: FederationConfig = field(
        default_factory=lambda: FederationConfig(model=ModelSpec((8, 16, 5)), n_clients=10, rounds=5)
    )
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)


# ---------------------------------------------------------------------------
# Config parsing and validation

def _check_unknown(section: dict, allowed: set[str], path: str, problems: list[str]) -> None:
    for key in section:
        if key not in allowed:
            problems.append(f"{path}{key}: unknown key")


def _read(section: dict, key: str, kind, default, path: str, problems: list[str], check=None):
    """Fetch and type-check one key, recording problems instead of raising."""
    if key not in section or section[key] is None:
        if key in section and section[key] is None and kind is not None:
            return default  # explicit null selects the default / optional value
        return default
    value = section[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind in (int, float) and isinstance(value, bool):
        problems.append(f"{path}{key}: expected {kind.__name__}, got bool")
        return default
    if kind is not None and not isinstance(value, kind):
        problems.append(f"{path}{key}: expected {kind.__name__}, got {type(value).__name__}")
        return default
    if check is not None:
        message = check(value)
        if message:
            problems.append(f"{path}{key}: {message}")
            return default
    return value


def _positive(v):
    return None if v > 0 else f"must be positive, got {v}"


def _nonnegative(v):
    return None if v >= 0 else f"must be nonnegative, got {v}"


def parse_config_dict(raw: dict) -> ExperimentConfig:
    """Validate a nested dict and materialize every default."""
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a mapping"])
    problems: list[str] = []
    _check_unknown(
        raw,
        {"name", "output_dir", "seed", "experiment", "federation", "model", "ivon", "data", "metrics"},
        "", problems,
    )
    name = _read(raw, "name", str, "run", "", problems)
    output_dir = _read(raw, "output_dir", str, "runs", "", problems)
    seed = _read(raw, "seed", int, 0, "", problems)

    exp = raw.get("experiment") or {}
    if not isinstance(exp, dict):
        problems.append("experiment: expected a mapping")
        exp = {}
    _check_unknown(exp, {"mode", "ablation_epochs"}, "experiment.", problems)
    mode = _read(exp, "mode", str, "standard", "experiment.", problems,
                 lambda v: None if v in MODES else f"must be one of {MODES}")
    ablation_raw = _read(exp, "ablation_epochs", list, [1, 2], "experiment.", problems)
    ablation_epochs: tuple[int, ...] = (1, 2)
    if isinstance(ablation_raw, list):
        if not ablation_raw or any(not isinstance(e, int) or isinstance(e, bool) or e < 1 for e in ablation_raw):
            problems.append("experiment.ablation_epochs: expected a nonempty list of positive ints")
        else:
            ablation_epochs = tuple(ablation_raw)

    fed = raw.get("federation") or {}
    if not isinstance(fed, dict):
        problems.append("federation: expected a mapping")
        fed = {}
    _check_unknown(
        fed,
        {"n_clients", "rounds", "participation_fraction", "algorithm", "eval_every",
         "baseline_optimizer", "personalization"},
        "federation.", problems,
    )
    n_clients = _read(fed, "n_clients", int, 10, "federation.", problems, _positive)
    rounds = _read(fed, "rounds", int, 5, "federation.", problems, _nonnegative)
    fraction = _read(fed, "participation_fraction", float, 1.0, "federation.", problems,
                     lambda v: None if 0.0 < v <= 1.0 else f"must lie in (0, 1], got {v}")
    algorithm = _read(fed, "algorithm", str, "fedivon", "federation.", problems,
                      lambda v: None if v in ("fedivon", "fedavg", "local_only")
                      else "must be one of ('fedivon', 'fedavg', 'local_only')")
    eval_every = _read(fed, "eval_every", int, 1, "federation.", problems, _positive)
    baseline_optimizer = _read(fed, "baseline_optimizer", str, "sgd", "federation.", problems,
                               lambda v: None if v in ("sgd", "adam") else "must be 'sgd' or 'adam'")
    personalization = None
    pers = fed.get("personalization")
    if pers is not None:
        if not isinstance(pers, dict):
            problems.append("federation.personalization: expected a mapping")
        else:
            _check_unknown(pers, {"beta"}, "federation.personalization.", problems)
            beta = _read(pers, "beta", float, 1.0, "federation.personalization.", problems, _nonnegative)
            personalization = PersonalizationConfig(beta=beta)
    if mode == "personalized" and personalization is None:
        personalization = PersonalizationConfig()

    model_raw = raw.get("model") or {}
    if not isinstance(model_raw, dict):
        problems.append("model: expected a mapping")
        model_raw = {}
    _check_unknown(model_raw, {"layer_sizes", "activation"}, "model.", problems)
    layer_sizes = _read(model_raw, "layer_sizes", list, [8, 16, 5], "model.", problems,
                        lambda v: None if len(v) >= 2 and all(isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in v)
                        else "expected a list of >= 2 positive ints")
    activation = _read(model_raw, "activation", str, "relu", "model.", problems,
                       lambda v: None if v in ("relu", "tanh") else "must be 'relu' or 'tanh'")

    ivon_raw = raw.get("ivon") or {}
    if not isinstance(ivon_raw, dict):
        problems.append("ivon: expected a mapping")
        ivon_raw = {}
    _check_unknown(
        ivon_raw,
        {"beta1", "beta2", "lr_initial", "lr_final", "weight_decay", "ess", "h_init",
         "batch_size", "epochs", "train_mc_samples", "clip_grad_norm"},
        "ivon.", problems,
    )
    unit = lambda v: None if 0.0 <= v < 1.0 else f"must lie in [0, 1), got {v}"
    beta1 = _read(ivon_raw, "beta1", float, 0.9, "ivon.", problems, unit)
    beta2 = _read(ivon_raw, "beta2", float, 0.99999, "ivon.", problems, unit)
    lr_initial = _read(ivon_raw, "lr_initial", float, 0.1, "ivon.", problems, _positive)
    lr_final = _read(ivon_raw, "lr_final", float, 0.01, "ivon.", problems, _positive)
    weight_decay = _read(ivon_raw, "weight_decay", float, 2e-4, "ivon.", problems, _positive)
    ess = _read(ivon_raw, "ess", float, 5000.0, "ivon.", problems, _positive)
    if "ess" in ivon_raw and ivon_raw["ess"] is None:
        ess = None  # explicit null: use each client's dataset size
    h_init = _read(ivon_raw, "h_init", float, 1.0, "ivon.", problems, _nonnegative)
    batch_size = _read(ivon_raw, "batch_size", int, 32, "ivon.", problems, _positive)
    epochs = _read(ivon_raw, "epochs", int, 2, "ivon.", problems, _nonnegative)
    train_mc_samples = _read(ivon_raw, "train_mc_samples", int, 1, "ivon.", problems, _positive)
    clip_grad_norm = _read(ivon_raw, "clip_grad_norm", float, None, "ivon.", problems, _positive)
    if lr_final > lr_initial:
        problems.append(f"ivon.lr_final: must not exceed lr_initial ({lr_final} > {lr_initial})")

    data_raw = raw.get("data") or {}
    if not isinstance(data_raw, dict):
        problems.append("data: expected a mapping")
        data_raw = {}
    _check_unknown(
        data_raw,
        {"generator", "blobs", "superclass", "idx", "csv", "test_fraction", "partition"},
        "data.", problems,
    )
    generator = _read(data_raw, "generator", str, "blobs", "data.", problems,
                      lambda v: None if v in GENERATORS else f"must be one of {GENERATORS}")
    blobs = data_raw.get("blobs") or {}
    _check_unknown(blobs, {"n_classes", "n_per_class", "dim", "separation"}, "data.blobs.", problems)
    blobs_n_classes = _read(blobs, "n_classes", int, 5, "data.blobs.", problems,
                            lambda v: None if v >= 2 else "need at least 2 classes")
    blobs_n_per_class = _read(blobs, "n_per_class", int, 200, "data.blobs.", problems, _positive)
    blobs_dim = _read(blobs, "dim", int, 8, "data.blobs.", problems, _positive)
    blobs_separation = _read(blobs, "separation", float, 6.0, "data.blobs.", problems, _positive)
    sup = data_raw.get("superclass") or {}
    _check_unknown(sup, {"n_super", "n_sub_per_super", "n_per_sub", "dim"}, "data.superclass.", problems)
    super_n_super = _read(sup, "n_super", int, 4, "data.superclass.", problems,
                          lambda v: None if v >= 2 else "need at least 2 superclasses")
    super_n_sub = _read(sup, "n_sub_per_super", int, 3, "data.superclass.", problems, _positive)
    super_n_per_sub = _read(sup, "n_per_sub", int, 100, "data.superclass.", problems, _positive)
    super_dim = _read(sup, "dim", int, 8, "data.superclass.", problems, _positive)
    idx = data_raw.get("idx") or {}
    _check_unknown(idx, {"train_images", "train_labels", "test_images", "test_labels"}, "data.idx.", problems)
    idx_paths = {k: _read(idx, k, str, None, "data.idx.", problems)
                 for k in ("train_images", "train_labels", "test_images", "test_labels")}
    csv = data_raw.get("csv") or {}
    _check_unknown(csv, {"train", "test"}, "data.csv.", problems)
    csv_train = _read(csv, "train", str, None, "data.csv.", problems)
    csv_test = _read(csv, "test", str, None, "data.csv.", problems)
    test_fraction = _read(data_raw, "test_fraction", float, 0.25, "data.", problems,
                          lambda v: None if 0.0 < v < 1.0 else f"must lie in (0, 1), got {v}")
    part = data_raw.get("partition") or {}
    _check_unknown(part, {"scheme", "shards_per_client", "classes_per_client"}, "data.partition.", problems)
    scheme = _read(part, "scheme", str, "shard", "data.partition.", problems,
                   lambda v: None if v in SCHEMES else f"must be one of {SCHEMES}")
    shards_per_client = _read(part, "shards_per_client", int, 2, "data.partition.", problems, _positive)
    classes_per_client = _read(part, "classes_per_client", int, 3, "data.partition.", problems, _positive)

    metrics_raw = raw.get("metrics") or {}
    if not isinstance(metrics_raw, dict):
        problems.append("metrics: expected a mapping")
        metrics_raw = {}
    _check_unknown(metrics_raw, {"mc_test_samples", "ece_bins", "ood"}, "metrics.", problems)
    mc_test_samples = _read(metrics_raw, "mc_test_samples", int, 64, "metrics.", problems, _nonnegative)
    ece_bins = _read(metrics_raw, "ece_bins", int, 10, "metrics.", problems, _positive)
    ood = metrics_raw.get("ood") or {}
    _check_unknown(ood, {"n_samples", "margin"}, "metrics.ood.", problems)
    ood_n_samples = _read(ood, "n_samples", int, 500, "metrics.ood.", problems, _positive)
    ood_margin = _read(ood, "margin", float, 3.0, "metrics.ood.", problems, _positive)

    if generator == "idx" and any(v is None for v in idx_paths.values()):
        missing = [k for k, v in idx_paths.items() if v is None]
        problems.append(f"data.idx: generator 'idx' requires {missing}")
    if generator == "csv" and csv_train is None:
        problems.append("data.csv.train: required for generator 'csv'")
    if scheme == "concept_drift" and generator not in ("superclass",):
        problems.append("data.partition.scheme: concept_drift requires the superclass generator")

    if problems:
        raise ConfigError(problems)

    model = ModelSpec(tuple(layer_sizes), activation)
    ivon_cfg = IvonConfig(
        beta1=beta1, beta2=beta2, lr_initial=lr_initial, lr_final=lr_final,
        weight_decay=weight_decay, ess=ess, h_init=h_init, batch_size=batch_size,
        epochs=epochs, train_mc_samples=train_mc_samples, clip_grad_norm=clip_grad_norm,
    )
    federation = FederationConfig(
        model=model, n_clients=n_clients, rounds=rounds, participation_fraction=fraction,
        algorithm=algorithm, personalization=personalization, ivon=ivon_cfg,
        eval_every=eval_every, seed=seed, baseline_optimizer=baseline_optimizer,
    )
    data_cfg = DataConfig(
        generator=generator,
        blobs_n_classes=blobs_n_classes, blobs_n_per_class=blobs_n_per_class,
        blobs_dim=blobs_dim, blobs_separation=blobs_separation,
        super_n_super=super_n_super, super_n_sub_per_super=super_n_sub,
        super_n_per_sub=super_n_per_sub, super_dim=super_dim,
        idx_train_images=idx_paths["train_images"], idx_train_labels=idx_paths["train_labels"],
        idx_test_images=idx_paths["test_images"], idx_test_labels=idx_paths["test_labels"],
        csv_train=csv_train, csv_test=csv_test,
        test_fraction=test_fraction, scheme=scheme,
        shards_per_client=shards_per_client, classes_per_client=classes_per_client,
    )
    metrics_cfg = MetricsConfig(
        mc_test_samples=mc_test_samples, ece_bins=ece_bins,
        ood_n_samples=ood_n_samples, ood_margin=ood_margin,
    )
    return ExperimentConfig(
        name=name, output_dir=output_dir, seed=seed, mode=mode,
        ablation_epochs=ablation_epochs, federation=federation,
        data=data_cfg, metrics=metrics_cfg,
    )


def parse_config(path: str | Path) -> ExperimentConfig:
    """Load and validate a YAML or JSON experiment config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        raw = json.loads(text)
    else:
        raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    return parse_config_dict(raw)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Fully resolved config as a plain dict; parse_config_dict inverts it."""
    fed = cfg.federation
    out: dict[str, Any] = {
        "name": cfg.name,
        "output_dir": cfg.output_dir,
        "seed": cfg.seed,
        "experiment": {"mode": cfg.mode, "ablation_epochs": list(cfg.ablation_epochs)},
        "federation": {
            "n_clients": fed.n_clients,
            "rounds": fed.rounds,
            "participation_fraction": fed.participation_fraction,
            "algorithm": fed.algorithm,
            "eval_every": fed.eval_every,
            "baseline_optimizer": fed.baseline_optimizer,
            "personalization": None if fed.personalization is None else {"beta": fed.personalization.beta},
        },
        "model": {"layer_sizes": list(fed.model.layer_sizes), "activation": fed.model.activation},
        "ivon": {
            "beta1": fed.ivon.beta1, "beta2": fed.ivon.beta2,
            "lr_initial": fed.ivon.lr_initial, "lr_final": fed.ivon.lr_final,
            "weight_decay": fed.ivon.weight_decay, "ess": fed.ivon.ess,
            "h_init": fed.ivon.h_init, "batch_size": fed.ivon.batch_size,
            "epochs": fed.ivon.epochs, "train_mc_samples": fed.ivon.train_mc_samples,
            "clip_grad_norm": fed.ivon.clip_grad_norm,
        },
        "data": {
            "generator": cfg.data.generator,
            "blobs": {
                "n_classes": cfg.data.blobs_n_classes, "n_per_class": cfg.data.blobs_n_per_class,
                "dim": cfg.data.blobs_dim, "separation": cfg.data.blobs_separation,
            },
            "superclass": {
                "n_super": cfg.data.super_n_super, "n_sub_per_super": cfg.data.super_n_sub_per_super,
                "n_per_sub": cfg.data.super_n_per_sub, "dim": cfg.data.super_dim,
            },
            "idx": {
                "train_images": cfg.data.idx_train_images, "train_labels": cfg.data.idx_train_labels,
                "test_images": cfg.data.idx_test_images, "test_labels": cfg.data.idx_test_labels,
            },
            "csv": {"train": cfg.data.csv_train, "test": cfg.data.csv_test},
            "test_fraction": cfg.data.test_fraction,
            "partition": {
                "scheme": cfg.data.scheme,
                "shards_per_client": cfg.data.shards_per_client,
                "classes_per_client": cfg.data.classes_per_client,
            },
        },
        "metrics": {
            "mc_test_samples": cfg.metrics.mc_test_samples,
            "ece_bins": cfg.metrics.ece_bins,
            "ood": {"n_samples": cfg.metrics.ood_n_samples, "margin": cfg.metrics.ood_margin},
        },
    }
    return out


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _resume_compatible(old: dict, new: dict) -> bool:
    # Extending a run with more rounds is the one allowed config change.
    a, b = json.loads(json.dumps(old)), json.loads(json.dumps(new))
    a.get("federation", {}).pop("rounds", None)
    b.get("federation", {}).pop("rounds", None)
    return a == b


# ---------------------------------------------------------------------------
# Data assembly

def _build_datasets(cfg: ExperimentConfig):
    """Generate or load the (train, test) pair in raw label space."""
    d = cfg.data
    if d.generator == "blobs":
        full = datagen.synth_blobs(
            d.blobs_n_classes, d.blobs_n_per_class, d.blobs_dim, d.blobs_separation,
            int(derive_rng(cfg.seed, "data").integers(2**31)),
        )
        return datagen.split_dataset(full, d.test_fraction, int(derive_rng(cfg.seed, "split").integers(2**31)))
    if d.generator == "superclass":
        full = datagen.synth_superclass(
            d.super_n_super, d.super_n_sub_per_super, d.super_n_per_sub, d.super_dim,
            int(derive_rng(cfg.seed, "data").integers(2**31)),
        )
        return datagen.split_dataset(full, d.test_fraction, int(derive_rng(cfg.seed, "split").integers(2**31)))
    if d.generator == "idx":
        train = datagen.load_idx(d.idx_train_images, d.idx_train_labels)
        test = datagen.load_idx(d.idx_test_images, d.idx_test_labels)
        return train, test
    train = datagen.load_csv(d.csv_train)
    if d.csv_test is not None:
        return train, datagen.load_csv(d.csv_test)
    return datagen.split_dataset(train, d.test_fraction, int(derive_rng(cfg.seed, "split").integers(2**31)))


def _build_clients(cfg: ExperimentConfig, train, test):
    """Partition the train set and attach matched test splits per client."""
    d = cfg.data
    fed = cfg.federation
    seed = int(derive_rng(cfg.seed, "partition").integers(2**31))
    needs_matched = fed.personalization is not None or fed.algorithm == "local_only"

    if d.scheme == "concept_drift":
        plan, choices = datagen.concept_drift_partition(train, fed.n_clients, seed)
        train_super = datagen.relabel_to_superclass(train)
        test_super = datagen.relabel_to_superclass(test)
        clients = []
        for cid, ix in enumerate(plan.client_indices):
            handle = ClientHandle(cid, train_super.inputs[ix], train_super.labels[ix])
            match = datagen.matched_indices(test.labels, choices[cid])
            if len(match):
                handle.test_inputs = test_super.inputs[match]
                handle.test_labels = test_super.labels[match]
            clients.append(handle)
        return clients, train_super, test_super

    if d.scheme == "class_skew":
        plan, class_sets = datagen.class_skew_partition(train, fed.n_clients, d.classes_per_client, seed)
        label_sets = class_sets
    else:
        plan = datagen.shard_partition(train, fed.n_clients, d.shards_per_client, seed)
        label_sets = [np.unique(train.labels[ix]) for ix in plan.client_indices]

    clients = []
    for cid, ix in enumerate(plan.client_indices):
        handle = ClientHandle(cid, train.inputs[ix], train.labels[ix])
        if needs_matched:
            match = datagen.matched_indices(test.labels, label_sets[cid])
            if len(match):
                handle.test_inputs = test.inputs[match]
                handle.test_labels = test.labels[match]
        clients.append(handle)
    return clients, train, test


# ---------------------------------------------------------------------------
# Run execution

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _execute_single(
    cfg: ExperimentConfig, run_dir: Path, parallel: int, resume: bool
) -> FederationResult:
    run_dir.mkdir(parents=True, exist_ok=True)
    train, test = _build_datasets(cfg)
    clients, train, test = _build_clients(cfg, train, test)
    fed = cfg.federation
    if train.dim != fed.model.input_dim:
        raise ConfigError([f"model.layer_sizes: input dim {fed.model.input_dim} does not match data dim {train.dim}"])
    if train.n_classes != fed.model.n_classes:
        raise ConfigError([
            f"model.layer_sizes: class count {fed.model.n_classes} does not match data classes {train.n_classes}"
        ])

    ood_points = None
    if cfg.mode == "ood":
        ood_points = datagen.ood_inputs(
            train, cfg.metrics.ood_n_samples,
            int(derive_rng(cfg.seed, "ood").integers(2**31)), cfg.metrics.ood_margin,
        )

    manifest_path = run_dir / "manifest.json"
    metrics_path = run_dir / "metrics.jsonl"
    checkpoint_path = run_dir / "checkpoint.json"

    start_round = 0
    initial_global = None
    if resume and checkpoint_path.exists():
        if manifest_path.exists():
            previous = json.loads(manifest_path.read_text(encoding="utf-8"))
            if not _resume_compatible(previous.get("config", {}), config_to_dict(cfg)):
                raise ConfigError(["resume: config does not match the manifest of the existing run"])
        ckpt_round, ckpt_model, ckpt_global, ckpt_pms = load_checkpoint(checkpoint_path)
        if ckpt_model != fed.model:
            raise ConfigError(["resume: checkpoint model does not match the config"])
        start_round = ckpt_round
        initial_global = ckpt_global
        for client in clients:
            if client.id in ckpt_pms:
                client.posterior = ckpt_pms[client.id]
    else:
        manifest = {
            "name": cfg.name,
            "seed": cfg.seed,
            "created_at": _now(),
            "config": config_to_dict(cfg),
            "config_sha256": config_hash(cfg),
            "artifacts": {
                "metrics": metrics_path.name,
                "summary": "summary.csv",
                "checkpoint": checkpoint_path.name,
                "history": "history.json",
            },
        }
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        metrics_path.write_text("", encoding="utf-8")

    sink_file = open(metrics_path, "a", encoding="utf-8")

    def sink(record: MetricsRecord) -> None:
        sink_file.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
        sink_file.flush()

    ctx = EvalContext(
        test_inputs=test.inputs,
        test_labels=test.labels,
        mc_samples=cfg.metrics.mc_test_samples,
        ece_bins=cfg.metrics.ece_bins,
        ood_inputs=ood_points,
        record_sink=sink,
    )
    personalized = fed.personalization is not None or fed.algorithm == "local_only"

    def checkpoint_round(state, record):
        if not record.metrics and record.round != fed.rounds:
            return
        pms = {c.id: c.posterior for c in state.clients if c.posterior is not None} if personalized else None
        save_checkpoint(checkpoint_path, record.round, state.global_model, fed.model, pms)

    try:
        result = run_federation(
            fed, clients, eval_ctx=ctx, n_workers=parallel,
            initial_global=initial_global, start_round=start_round,
            round_sink=checkpoint_round,
        )
    finally:
        sink_file.close()

    if fed.rounds == 0:
        pms = {cid: p for cid, p in result.client_posteriors.items() if p is not None} if personalized else None
        save_checkpoint(checkpoint_path, 0, result.global_model, fed.model, pms)
    history = [
        {"round": r.round, "client_ids": r.client_ids,
         "client_losses": {str(k): v for k, v in r.client_losses.items()}}
        for r in result.history.records
    ]
    (run_dir / "history.json").write_text(json.dumps(history), encoding="utf-8")
    return result


def run(
    config: ExperimentConfig | str | Path,
    output_dir: Optional[str] = None,
    seed: Optional[int] = None,
    parallel: int = 1,
    resume: bool = False,
) -> Path:
    """Execute the configured experiment; returns the run directory."""
    cfg = config if isinstance(config, ExperimentConfig) else parse_config(config)
    if seed is not None:
        cfg = replace(cfg, seed=seed, federation=replace(cfg.federation, seed=seed))
    out_base = output_dir or os.environ.get(ENV_OUTPUT_DIR) or cfg.output_dir
    run_dir = Path(out_base) / cfg.name
    if cfg.mode == "ablation":
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "name": cfg.name,
            "mode": "ablation",
            "created_at": _now(),
            "config_sha256": config_hash(cfg),
            "sub_runs": [f"E{e}" for e in cfg.ablation_epochs],
        }
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        for epochs in cfg.ablation_epochs:
            sub = replace(
                cfg,
                mode="standard",
                federation=replace(cfg.federation, ivon=replace(cfg.federation.ivon, epochs=epochs)),
            )
            _execute_single(sub, run_dir / f"E{epochs}", parallel, resume)
    else:
        _execute_single(cfg, run_dir, parallel, resume)
    summarize(run_dir)
    return run_dir


# ---------------------------------------------------------------------------
# Summaries

SUMMARY_COLUMNS = ("acc", "ece", "nll", "brier")


def summarize(run_dir: str | Path) -> list[dict]:
    """Final-round metric table over every metrics.jsonl below run_dir.

    One row per (run, algorithm, split, variant); writes summary.csv in
    run_dir and returns the rows.
    """
    run_dir = Path(run_dir)
    streams = sorted(run_dir.rglob("metrics.jsonl"))
    if not streams:
        raise FileNotFoundError(f"no metrics.jsonl found under {run_dir}")
    rows: list[dict] = []
    for stream in streams:
        records = [MetricsRecord.from_json(json.loads(line))
                   for line in stream.read_text(encoding="utf-8").splitlines() if line]
        if not records:
            continue
        label = str(stream.parent.relative_to(run_dir)) if stream.parent != run_dir else "."
        final_round = max(r.round for r in records)
        for rec in records:
            if rec.round != final_round:
                continue
            variant = "@mean" if rec.mc_samples == 0 else "mc"
            row = {"run": label, "algorithm": rec.algorithm, "split": rec.split, "variant": variant}
            row.update({"acc": rec.acc, "ece": rec.ece, "nll": rec.nll, "brier": rec.brier})
            rows.append(row)
    rows.sort(key=lambda r: (r["run"], r["algorithm"], r["split"], r["variant"]))
    header = ["run", "algorithm", "split", "variant", *SUMMARY_COLUMNS]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(row[h]) for h in header))
    (run_dir / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows


def _markdown_table(rows: list[dict]) -> str:
    header = ["run", "algorithm", "split", "variant", *SUMMARY_COLUMNS]
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in rows:
        cells = [str(row[h]) if h not in SUMMARY_COLUMNS else f"{row[h]:.4f}" for h in header]
        out.append("| " + " | ".join(cells) + " |")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Entry point

def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="fedivon", description="Federated variational learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="execute an experiment config")
    run_p.add_argument("config", help="path to a YAML or JSON config file")
    run_p.add_argument("--seed", type=int, default=None, help="override the root seed")
    run_p.add_argument("--parallel", type=int, default=1, help="worker threads for client updates")
    run_p.add_argument("--output", default=None, help="override the output directory")
    run_p.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    sum_p = sub.add_parser("summarize", help="rebuild the summary table for a run directory")
    sum_p.add_argument("run_dir", help="directory holding metrics.jsonl streams")
    args = parser.parse_args(argv)

    try:
        if args.command == "run":
            run_dir = run(args.config, output_dir=args.output, seed=args.seed,
                          parallel=args.parallel, resume=args.resume)
            print(f"run complete: {run_dir}")
            print(_markdown_table(summarize(run_dir)))
        else:
            print(_markdown_table(summarize(args.run_dir)))
        return 0
    except ConfigError as exc:
        report = {"error": "ConfigError", "message": str(exc), "problems": exc.problems}
        print(json.dumps(report, indent=2), file=sys.stderr)
        return 1
    except Exception as exc:  # structured report for any failure
        report = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(report, indent=2), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
