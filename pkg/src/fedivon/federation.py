"""Round-based federated training loop.

Each round samples clients, broadcasts the global (mean, hessian) pair,
runs the selected local trainer on every sampled client, and fuses the
returned posteriors.  Every random stream is derived from
(seed, purpose, round, client), so client updates may run in parallel
worker threads without changing any number, and the whole run is a pure
function of (config, clients, seed).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .aggregation import ClientContribution, GlobalModel, aggregate, fedavg_aggregate
from .datagen import Dataset
from .ivon import (
    IvonConfig,
    PriorSpec,
    VariationalPosterior,
    client_update,
    lr_schedule,
    personalized_client_update,
    posterior_from_record,
    posterior_to_record,
)
from .metrics import (
    PredictiveBatch,
    accuracy,
    auroc,
    brier,
    ece,
    mc_predict,
    nll,
    predictive_entropy,
)
from .nn import Batch, ModelSpec, init_params, loss_and_grad, param_count
from .seeding import derive_rng

ALGORITHMS = ("fedivon", "fedavg", "local_only")
BASELINE_OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class PersonalizationConfig:
    beta: float = 1.0

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError("personalization beta must be nonnegative")


@dataclass(frozen=True)
class FederationConfig:
    """Protocol parameters for one federated run."""

    model: ModelSpec
    n_clients: int
    rounds: int
    participation_fraction: float = 1.0
    algorithm: str = "fedivon"
    personalization: Optional[PersonalizationConfig] = None
    ivon: IvonConfig = field(default_factory=IvonConfig)
    eval_every: int = 1
    seed: int = 0
    baseline_optimizer: str = "sgd"

    def __post_init__(self) -> None:
        if self.n_clients < 1 or self.rounds < 0:
            raise ValueError("need at least one client and a nonnegative round count")
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ValueError("participation_fraction must lie in (0, 1]")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.baseline_optimizer not in BASELINE_OPTIMIZERS:
            raise ValueError(f"baseline_optimizer must be one of {BASELINE_OPTIMIZERS}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class ClientHandle:
    """One simulated client: id, private training data, optional matched test split."""

    id: int
    train_inputs: np.ndarray
    train_labels: np.ndarray
    test_inputs: Optional[np.ndarray] = None
    test_labels: Optional[np.ndarray] = None
    posterior: Optional[VariationalPosterior] = None

    def __post_init__(self) -> None:
        self.train_inputs = np.asarray(self.train_inputs, dtype=np.float64)
        self.train_labels = np.asarray(self.train_labels, dtype=np.int64)
        if len(self.train_labels) == 0:
            raise ValueError(f"client {self.id} has no training data")

    @property
    def n_examples(self) -> int:
        return len(self.train_labels)


def clients_from_partition(dataset: Dataset, plan) -> list[ClientHandle]:
    """Build handles from a dataset and a PartitionPlan."""
    return [
        ClientHandle(cid, dataset.inputs[ix], dataset.labels[ix])
        for cid, ix in enumerate(plan.client_indices)
    ]


@dataclass
class RoundRecord:
    round: int
    client_ids: list[int]
    client_losses: dict[int, float]
    metrics: list = field(default_factory=list)


@dataclass
class RoundHistory:
    records: list[RoundRecord] = field(default_factory=list)

    def append(self, record: RoundRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def all_metrics(self) -> list:
        return [m for r in self.records for m in r.metrics]


@dataclass
class EvalContext:
    """Held-out evaluation data and metric settings for a run."""

    test_inputs: np.ndarray
    test_labels: np.ndarray
    mc_samples: int = 64
    ece_bins: int = 10
    ood_inputs: Optional[np.ndarray] = None
    record_sink: Optional[Callable] = None


@dataclass
class FederationResult:
    history: RoundHistory
    global_model: GlobalModel
    client_posteriors: dict[int, Optional[VariationalPosterior]]


def sample_clients(n_clients: int, fraction: float, round_index: int, seed: int) -> list[int]:
    """Uniform sample without replacement; deterministic per (seed, round)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n_sampled = min(max(int(round(fraction * n_clients)), 1), n_clients)
    rng = derive_rng(seed, "sample", round_index)
    ids = rng.choice(n_clients, size=n_sampled, replace=False)
    return sorted(int(i) for i in ids)


def client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    """The training stream used by one client in one round."""
    return derive_rng(seed, "client", round_index, client_id)


def initial_global_model(model: ModelSpec, config: IvonConfig, seed: int) -> GlobalModel:
    """Round-zero broadcast: seeded init weights and a constant initial hessian."""
    mean = init_params(model, int(derive_rng(seed, "init").integers(2**31)))
    return GlobalModel(mean, np.full_like(mean, config.h_init))


# ---------------------------------------------------------------------------
# Baseline first-order client trainers (point estimates for FedAvg)

def sgd_client_update(
    inputs: np.ndarray,
    labels: np.ndarray,
    model: ModelSpec,
    init_mean: np.ndarray,
    config: IvonConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Plain minibatch SGD with weight decay on the same linear lr schedule."""
    theta = np.array(init_mean, dtype=np.float64, copy=True)
    n = len(labels)
    steps_per_epoch = -(-n // config.batch_size)
    lrs = lr_schedule(config, config.epochs * steps_per_epoch)
    t = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            _, grad = loss_and_grad(model, theta, Batch(inputs[idx], labels[idx]))
            theta -= float(lrs[t]) * (grad + config.weight_decay * theta)
            t += 1
    return theta


def adam_client_update(
    inputs: np.ndarray,
    labels: np.ndarray,
    model: ModelSpec,
    init_mean: np.ndarray,
    config: IvonConfig,
    rng: np.random.Generator,
    eps: float = 1e-8,
) -> np.ndarray:
    """Adam with decoupled bias correction; momentum resets each call."""
    theta = np.array(init_mean, dtype=np.float64, copy=True)
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    b1, b2 = 0.9, 0.999
    n = len(labels)
    steps_per_epoch = -(-n // config.batch_size)
    lrs = lr_schedule(config, config.epochs * steps_per_epoch)
    t = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            _, grad = loss_and_grad(model, theta, Batch(inputs[idx], labels[idx]))
            grad = grad + config.weight_decay * theta
            t += 1
            m1 = b1 * m1 + (1 - b1) * grad
            m2 = b2 * m2 + (1 - b2) * grad**2
            theta -= float(lrs[t - 1]) * (m1 / (1 - b1**t)) / (np.sqrt(m2 / (1 - b2**t)) + eps)
    return theta


# ---------------------------------------------------------------------------
# Round execution

@dataclass
class FederationState:
    """Mutable orchestrator state: the only writer is the round loop."""

    config: FederationConfig
    clients: list[ClientHandle]
    global_model: GlobalModel
    round_index: int = 0
    history: RoundHistory = field(default_factory=RoundHistory)

    def total_examples(self) -> int:
        return sum(c.n_examples for c in self.clients)


def _train_one(
    state: FederationState, client: ClientHandle, round_index: int
) -> tuple[int, VariationalPosterior | np.ndarray]:
    cfg = state.config
    rng = client_rng(cfg.seed, round_index, client.id)
    broadcast = state.global_model
    try:
        if cfg.algorithm == "fedavg":
            trainer = sgd_client_update if cfg.baseline_optimizer == "sgd" else adam_client_update
            result = trainer(
                client.train_inputs, client.train_labels, cfg.model, broadcast.mean, cfg.ivon, rng
            )
        elif cfg.algorithm == "fedivon" and cfg.personalization is None:
            result = client_update(
                client.train_inputs,
                client.train_labels,
                cfg.model,
                broadcast.mean,
                broadcast.hessian,
                cfg.ivon,
                rng,
            )
        else:
            # Personalized FedIvon, or pure local fitting when beta is 0.
            beta = 0.0 if cfg.algorithm == "local_only" else cfg.personalization.beta
            start = client.posterior
            init_mean = broadcast.mean if start is None else start.mean
            init_hessian = broadcast.hessian if start is None else start.hessian
            prior = PriorSpec(broadcast.mean, broadcast.hessian, beta)
            result = personalized_client_update(
                client.train_inputs,
                client.train_labels,
                cfg.model,
                init_mean,
                init_hessian,
                prior,
                cfg.ivon,
                rng,
            )
    except Exception as exc:
        raise RuntimeError(f"client {client.id} failed in round {round_index}: {exc}") from exc
    return client.id, result


def _train_loss_at(state: FederationState, client: ClientHandle, mean: np.ndarray) -> float:
    loss, _ = loss_and_grad(state.config.model, mean, Batch(client.train_inputs, client.train_labels))
    return loss


def run_round(
    state: FederationState,
    evaluate: bool = False,
    eval_ctx: Optional[EvalContext] = None,
    n_workers: int = 1,
) -> RoundRecord:
    """Execute one communication round and append it to the history."""
    cfg = state.config
    round_index = state.round_index + 1
    sampled = sample_clients(cfg.n_clients, cfg.participation_fraction, round_index, cfg.seed)
    by_id = {c.id: c for c in state.clients}
    chosen = [by_id[i] for i in sampled]

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = dict(pool.map(lambda c: _train_one(state, c, round_index), chosen))
    else:
        results = dict(_train_one(state, c, round_index) for c in chosen)

    losses: dict[int, float] = {}
    personalized = cfg.personalization is not None or cfg.algorithm == "local_only"
    if cfg.algorithm == "fedavg":
        means = [(results[i], by_id[i].n_examples) for i in sampled]
        state.global_model = GlobalModel(fedavg_aggregate(means), state.global_model.hessian.copy())
        for i in sampled:
            losses[i] = _train_loss_at(state, by_id[i], results[i])
    else:
        for i in sampled:
            losses[i] = _train_loss_at(state, by_id[i], results[i].mean)
        if personalized:
            for i in sampled:
                by_id[i].posterior = results[i]
        if cfg.algorithm != "local_only":
            contribs = [
                ClientContribution(results[i].mean, results[i].hessian, by_id[i].n_examples)
                for i in sampled
            ]
            state.global_model = aggregate(contribs)

    record = RoundRecord(round_index, sampled, losses)
    state.round_index = round_index
    if evaluate and eval_ctx is not None:
        record.metrics = _evaluate(state, eval_ctx, round_index)
        if eval_ctx.record_sink is not None:
            for m in record.metrics:
                eval_ctx.record_sink(m)
    state.history.append(record)
    return record


# ---------------------------------------------------------------------------
# Evaluation

@dataclass
class MetricsRecord:
    """One evaluation result; serializes to the JSONL metrics schema."""

    round: int
    split: str
    algorithm: str
    acc: float
    nll: float
    ece: float
    brier: float
    n: int
    mc_samples: int
    auroc: Optional[float] = None

    def to_json(self) -> dict:
        out = {
            "round": self.round,
            "split": self.split,
            "algorithm": self.algorithm,
            "acc": self.acc,
            "nll": self.nll,
            "ece": self.ece,
            "brier": self.brier,
            "n": self.n,
            "mc_samples": self.mc_samples,
        }
        if self.auroc is not None:
            out["auroc"] = self.auroc
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsRecord":
        return cls(**obj)


def _metric_values(pred: PredictiveBatch, ece_bins: int) -> tuple[float, float, float, float]:
    return accuracy(pred), nll(pred), ece(pred, ece_bins), brier(pred)


def _eval_posterior_record(
    posterior: VariationalPosterior,
    model: ModelSpec,
    ctx: EvalContext,
    round_index: int,
    algorithm: str,
    split: str,
    mc_samples: int,
    rng: np.random.Generator,
    with_ood: bool,
) -> MetricsRecord:
    pred = mc_predict(posterior, model, ctx.test_inputs, mc_samples, rng, labels=ctx.test_labels)
    acc_v, nll_v, ece_v, brier_v = _metric_values(pred, ctx.ece_bins)
    auroc_v = None
    if with_ood and ctx.ood_inputs is not None:
        ood_probs = mc_predict(posterior, model, ctx.ood_inputs, mc_samples, rng)
        auroc_v = auroc(predictive_entropy(ood_probs), predictive_entropy(pred.probs))
    return MetricsRecord(
        round_index, split, algorithm, acc_v, nll_v, ece_v, brier_v, len(pred), mc_samples, auroc_v
    )


def _evaluate(state: FederationState, ctx: EvalContext, round_index: int) -> list[MetricsRecord]:
    cfg = state.config
    records: list[MetricsRecord] = []
    personalized = cfg.personalization is not None or cfg.algorithm == "local_only"

    if cfg.algorithm != "local_only":
        # The fused posterior is an example-weighted geometric mean of the
        # client Gaussians, so its effective sample size is the weighted
        # mean of the clients' (sum w_k * lambda_k), not their sum.
        if cfg.ivon.ess is not None:
            ess = cfg.ivon.ess
        else:
            counts = np.array([c.n_examples for c in state.clients], dtype=np.float64)
            ess = float((counts**2).sum() / counts.sum())
        global_post = VariationalPosterior(
            state.global_model.mean.copy(),
            state.global_model.hessian.copy(),
            ess,
            cfg.ivon.weight_decay,
        )
        variants = [0] if cfg.algorithm == "fedavg" else [0, ctx.mc_samples]
        for s in variants:
            rng = derive_rng(cfg.seed, "eval", round_index, s)
            records.append(
                _eval_posterior_record(
                    global_post, cfg.model, ctx, round_index, cfg.algorithm, "test",
                    s, rng, with_ood=True,
                )
            )

    if personalized:
        for s in (0, ctx.mc_samples):
            per_client = []
            total_n = 0
            for client in state.clients:
                if client.posterior is None or client.test_inputs is None:
                    continue
                rng = derive_rng(cfg.seed, "eval-pm", round_index, s, client.id)
                pred = mc_predict(
                    client.posterior, cfg.model, client.test_inputs, s, rng,
                    labels=client.test_labels,
                )
                per_client.append(_metric_values(pred, ctx.ece_bins))
                total_n += len(pred)
            if not per_client:
                continue
            means = np.mean(np.asarray(per_client), axis=0)
            records.append(
                MetricsRecord(
                    round_index, "client_test", cfg.algorithm,
                    float(means[0]), float(means[1]), float(means[2]), float(means[3]),
                    total_n, s,
                )
            )
    return records


# ---------------------------------------------------------------------------
# Full runs

def _should_evaluate(round_index: int, config: FederationConfig) -> bool:
    return round_index % config.eval_every == 0 or round_index == config.rounds


def run_federation(
    config: FederationConfig,
    clients: list[ClientHandle],
    eval_ctx: Optional[EvalContext] = None,
    n_workers: int = 1,
    initial_global: Optional[GlobalModel] = None,
    start_round: int = 0,
    round_sink: Optional[Callable] = None,
) -> FederationResult:
    """Run the configured number of rounds from a fresh or resumed state.

    ``round_sink(state, record)`` fires after every completed round,
    letting callers checkpoint mid-run.
    """
    if not clients:
        raise ValueError("need at least one client")
    if len({c.id for c in clients}) != len(clients):
        raise ValueError("client ids must be unique")
    if len(clients) != config.n_clients:
        raise ValueError(f"config expects {config.n_clients} clients, got {len(clients)}")
    global0 = initial_global.copy() if initial_global is not None else initial_global_model(
        config.model, config.ivon, config.seed
    )
    expected = param_count(config.model)
    if global0.mean.shape != (expected,):
        raise ValueError("initial global model does not match the model spec")
    state = FederationState(config, clients, global0, round_index=start_round)
    if config.personalization is not None or config.algorithm == "local_only":
        # Personal models start at the initial broadcast so PM evaluation
        # is defined for never-sampled clients too.
        for c in clients:
            if c.posterior is None:
                ess = config.ivon.ess if config.ivon.ess is not None else float(c.n_examples)
                c.posterior = VariationalPosterior(
                    global0.mean.copy(), global0.hessian.copy(), ess, config.ivon.weight_decay
                )
    while state.round_index < config.rounds:
        evaluate = eval_ctx is not None and _should_evaluate(state.round_index + 1, config)
        record = run_round(state, evaluate=evaluate, eval_ctx=eval_ctx, n_workers=n_workers)
        if round_sink is not None:
            round_sink(state, record)
    posteriors = {c.id: c.posterior for c in clients}
    return FederationResult(state.history, state.global_model, posteriors)


def run_personalized(
    config: FederationConfig,
    clients: list[ClientHandle],
    eval_ctx: Optional[EvalContext] = None,
    n_workers: int = 1,
    initial_global: Optional[GlobalModel] = None,
    start_round: int = 0,
    round_sink: Optional[Callable] = None,
) -> FederationResult:
    """Personalized run: per-client posteriors persist, server fuses them."""
    if config.personalization is None:
        raise ValueError("personalization config is required")
    return run_federation(
        config, clients, eval_ctx, n_workers, initial_global, start_round, round_sink
    )


# ---------------------------------------------------------------------------
# Checkpointing

def save_checkpoint(
    path: str | Path,
    round_index: int,
    global_model: GlobalModel,
    model: ModelSpec,
    client_posteriors: Optional[dict[int, VariationalPosterior]] = None,
) -> None:
    obj = {
        "round": int(round_index),
        "model": {"layer_sizes": list(model.layer_sizes), "activation": model.activation},
        "global": {
            "mean": global_model.mean.tolist(),
            "hessian": global_model.hessian.tolist(),
        },
    }
    if client_posteriors:
        obj["personalized"] = {
            str(cid): posterior_to_record(p) for cid, p in client_posteriors.items() if p is not None
        }
    Path(path).write_text(json.dumps(obj), encoding="utf-8")


def load_checkpoint(path: str | Path):
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    model = ModelSpec(tuple(obj["model"]["layer_sizes"]), obj["model"]["activation"])
    global_model = GlobalModel(
        np.asarray(obj["global"]["mean"], dtype=np.float64),
        np.asarray(obj["global"]["hessian"], dtype=np.float64),
    )
    personalized = {
        int(cid): posterior_from_record(rec) for cid, rec in obj.get("personalized", {}).items()
    }
    return obj["round"], model, global_model, personalized
