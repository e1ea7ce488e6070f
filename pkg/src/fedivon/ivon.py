"""Variational online Newton optimizer with an implicit Hessian estimate.

The optimizer maintains a diagonal Gaussian over the parameters with
mean ``m`` and variance ``sigma^2 = 1 / (ess * (h + delta))`` where ``h``
is an online curvature estimate.  Each step samples parameters from the
current Gaussian, turns the sampled gradient into an unbiased diagonal
Hessian estimate via ``ghat * (theta - m) / sigma^2``, and applies
Adam-style moving averages:

    g <- beta1 * g + (1 - beta1) * ghat
    h <- beta2 * h + (1 - beta2) * hhat
         + 0.5 * (1 - beta2)^2 * (h - hhat)^2 / (h + delta)
    m <- m - lr * (g / (1 - beta1^step) + delta * m) / (h + delta)

The module also provides the full multi-epoch client update, a
prior-anchored personalized variant, and plain VON / VOGN reference
steps used as independent oracles in the tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Batch, ModelSpec, loss_and_grad
from .seeding import as_rng


@dataclass
class VariationalPosterior:
    """Diagonal Gaussian q(theta) = N(mean, 1 / (ess * (hessian + weight_decay))).

    ``weight_decay`` may be a scalar or a per-coordinate array (the
    personalized update re-anchors it at a prior); the only hard
    requirement is ess * (hessian + weight_decay) > 0 everywhere.
    """

    mean: np.ndarray
    hessian: np.ndarray
    ess: float
    weight_decay: float | np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.hessian = np.asarray(self.hessian, dtype=np.float64)
        self.ess = float(self.ess)
        if not np.isscalar(self.weight_decay):
            self.weight_decay = np.asarray(self.weight_decay, dtype=np.float64)
            if self.weight_decay.shape != self.mean.shape:
                raise ValueError("per-coordinate weight_decay must match the mean's shape")
        if self.mean.shape != self.hessian.shape:
            raise ValueError("mean and hessian must have the same shape")
        if self.ess <= 0:
            raise ValueError("ess must be positive")
        if np.any(self.hessian < 0):
            raise ValueError("hessian entries must be nonnegative")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.hessian))):
            raise ValueError("posterior contains non-finite values")
        if np.any(self.ess * (self.hessian + self.weight_decay) <= 0):
            raise ValueError("ess * (hessian + weight_decay) must be positive everywhere")

    def copy(self) -> "VariationalPosterior":
        wd = self.weight_decay if np.isscalar(self.weight_decay) else self.weight_decay.copy()
        return VariationalPosterior(self.mean.copy(), self.hessian.copy(), self.ess, wd)


@dataclass(frozen=True)
class IvonConfig:
    """Optimizer hyperparameters.

    ``ess=None`` uses the client's dataset size as the effective sample
    size.  The learning rate decays linearly from lr_initial to lr_final
    across all steps of one client update.
    """

    beta1: float = 0.9
    beta2: float = 0.99999
    lr_initial: float = 0.1
    lr_final: float = 0.01
    weight_decay: float = 2e-4
    ess: float | None = None
    h_init: float = 1.0
    batch_size: int = 32
    epochs: int = 2
    train_mc_samples: int = 1
    clip_grad_norm: float | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.lr_initial <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_final > self.lr_initial:
            raise ValueError("lr_final must not exceed lr_initial")
        if self.weight_decay <= 0:
            raise ValueError("weight_decay must be positive")
        if self.ess is not None and self.ess <= 0:
            raise ValueError("ess must be positive when given")
        if self.h_init < 0:
            raise ValueError("h_init must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.train_mc_samples < 1:
            raise ValueError("train_mc_samples must be >= 1")
        if self.clip_grad_norm is not None and self.clip_grad_norm <= 0:
            raise ValueError("clip_grad_norm must be positive when given")


@dataclass
class IvonState:
    """Posterior plus gradient momentum and the step counter."""

    posterior: VariationalPosterior
    momentum: np.ndarray
    step: int
    config: IvonConfig


@dataclass
class PriorSpec:
    """Gaussian prior anchor for personalized training.

    ``beta`` scales how strongly the client is pulled toward the prior;
    beta = 0 removes the regularizer entirely.
    """

    mean: np.ndarray
    hessian: np.ndarray
    beta: float = 1.0

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.hessian = np.asarray(self.hessian, dtype=np.float64)
        if self.mean.shape != self.hessian.shape:
            raise ValueError("prior mean and hessian must have the same shape")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")


def sigma_sq(post: VariationalPosterior) -> np.ndarray:
    """Posterior variances 1 / (ess * (hessian + weight_decay))."""
    return 1.0 / (post.ess * (post.hessian + post.weight_decay))


def sample_theta(post: VariationalPosterior, rng: np.random.Generator | int) -> np.ndarray:
    """Draw theta = mean + sigma * eps with eps standard normal."""
    rng = as_rng(rng)
    return post.mean + np.sqrt(sigma_sq(post)) * rng.standard_normal(post.mean.shape)


def hessian_estimate(
    grad_hat: np.ndarray, theta: np.ndarray, post: VariationalPosterior
) -> np.ndarray:
    """Unbiased diagonal curvature estimate ghat * (theta - mean) / sigma^2.

    Individual estimates may be negative; the moving average in
    ivon_step is what keeps the tracked hessian nonnegative.
    """
    return grad_hat * (theta - post.mean) / sigma_sq(post)


def _first_nonfinite(name: str, arr: np.ndarray) -> None:
    bad = ~np.isfinite(arr)
    if np.any(bad):
        raise FloatingPointError(f"non-finite {name} at coordinate {int(np.argmax(bad))}")


def ivon_step(
    state: IvonState,
    grad_hat: np.ndarray,
    h_hat: np.ndarray,
    lr: float,
    anchor: np.ndarray | None = None,
) -> IvonState:
    """One optimizer step; returns a new state, inputs untouched.

    ``anchor`` shifts the decay term from weight_decay * m to
    weight_decay * (m - anchor); the default anchor is the origin.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    cfg = state.config
    post = state.posterior
    delta = post.weight_decay
    h_old = post.hessian

    g = cfg.beta1 * state.momentum + (1.0 - cfg.beta1) * grad_hat
    h = (
        cfg.beta2 * h_old
        + (1.0 - cfg.beta2) * h_hat
        + 0.5 * (1.0 - cfg.beta2) ** 2 * (h_old - h_hat) ** 2 / (h_old + delta)
    )
    h = np.maximum(h, 0.0)
    step = state.step + 1
    g_bar = g / (1.0 - cfg.beta1**step)
    pull = post.mean if anchor is None else post.mean - anchor
    m = post.mean - lr * (g_bar + delta * pull) / (h + delta)

    _first_nonfinite("mean", m)
    _first_nonfinite("hessian", h)
    _first_nonfinite("momentum", g)
    new_post = VariationalPosterior(m, h, post.ess, delta)
    return IvonState(new_post, g, step, cfg)


def lr_schedule(config: IvonConfig, n_steps: int) -> np.ndarray:
    """Linear decay from lr_initial to lr_final across n_steps."""
    if n_steps <= 1:
        return np.full(max(n_steps, 0), config.lr_initial)
    return np.linspace(config.lr_initial, config.lr_final, n_steps)


def _run_epochs(
    inputs: np.ndarray,
    labels: np.ndarray,
    model: ModelSpec,
    state: IvonState,
    rng: np.random.Generator,
    anchor: np.ndarray | None,
) -> VariationalPosterior:
    cfg = state.config
    n = len(labels)
    steps_per_epoch = -(-n // cfg.batch_size)
    lrs = lr_schedule(cfg, cfg.epochs * steps_per_epoch)
    t = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = Batch(inputs[idx], labels[idx])
            g_acc = np.zeros_like(state.posterior.mean)
            h_acc = np.zeros_like(state.posterior.hessian)
            for _ in range(cfg.train_mc_samples):
                theta = sample_theta(state.posterior, rng)
                _, g_hat = loss_and_grad(model, theta, batch)
                g_acc += g_hat
                h_acc += hessian_estimate(g_hat, theta, state.posterior)
            g_acc /= cfg.train_mc_samples
            h_acc /= cfg.train_mc_samples
            if cfg.clip_grad_norm is not None:
                norm = float(np.linalg.norm(g_acc))
                if norm > cfg.clip_grad_norm:
                    g_acc *= cfg.clip_grad_norm / norm
            state = ivon_step(state, g_acc, h_acc, float(lrs[t]), anchor=anchor)
            t += 1
    return state.posterior


def client_update(
    inputs: np.ndarray,
    labels: np.ndarray,
    model: ModelSpec,
    init_mean: np.ndarray,
    init_hessian: np.ndarray,
    config: IvonConfig,
    rng: np.random.Generator | int,
) -> VariationalPosterior:
    """Locally train the posterior from a broadcast (mean, hessian) pair.

    Runs ``config.epochs`` epochs of shuffled minibatches; momentum
    starts at zero and the effective sample size defaults to the local
    dataset size.  Deterministic given the stream.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("client dataset is empty")
    rng = as_rng(rng)
    ess = config.ess if config.ess is not None else float(len(labels))
    post = VariationalPosterior(
        np.array(init_mean, dtype=np.float64, copy=True),
        np.array(init_hessian, dtype=np.float64, copy=True),
        ess,
        config.weight_decay,
    )
    state = IvonState(post, np.zeros_like(post.mean), 0, config)
    return _run_epochs(inputs, labels, model, state, rng, anchor=None)


def personalized_client_update(
    inputs: np.ndarray,
    labels: np.ndarray,
    model: ModelSpec,
    init_mean: np.ndarray,
    init_hessian: np.ndarray,
    prior: PriorSpec,
    config: IvonConfig,
    rng: np.random.Generator | int,
) -> VariationalPosterior:
    """Client update regularized toward a prior instead of the origin.

    The decay strength becomes beta * (prior.hessian + weight_decay)
    per coordinate, the pull is toward prior.mean, and the same strength
    replaces weight_decay in every (h + delta) denominator.  With
    beta = 1 and a zero prior this is exactly client_update; with
    beta = 0 the regularizer vanishes and only the likelihood drives
    the fit.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("client dataset is empty")
    rng = as_rng(rng)
    ess = config.ess if config.ess is not None else float(len(labels))
    delta_eff = prior.beta * (prior.hessian + config.weight_decay)
    post = VariationalPosterior(
        np.array(init_mean, dtype=np.float64, copy=True),
        np.array(init_hessian, dtype=np.float64, copy=True),
        ess,
        delta_eff,
    )
    state = IvonState(post, np.zeros_like(post.mean), 0, config)
    return _run_epochs(inputs, labels, model, state, rng, anchor=prior.mean)


# ---------------------------------------------------------------------------
# Reference optimizers (independent oracles; raw update equations).

def von_step(
    mean: np.ndarray,
    hessian: np.ndarray,
    grad: np.ndarray,
    hess_diag: np.ndarray,
    lr: float,
    weight_decay: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw online-Newton step using an exact diagonal Hessian.

    The curvature average can go negative on non-convex losses; that is
    surfaced to the caller, not clamped.
    """
    h_new = (1.0 - lr) * hessian + lr * hess_diag
    m_new = mean - lr * (grad + weight_decay * mean) / (h_new + weight_decay)
    return m_new, h_new


def vogn_step(
    mean: np.ndarray,
    hessian: np.ndarray,
    grad: np.ndarray,
    sq_grad_mean: np.ndarray,
    lr: float,
    weight_decay: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton variant: curvature from mean squared per-sample gradients."""
    if np.any(sq_grad_mean < 0):
        raise ValueError("squared-gradient curvature must be nonnegative")
    h_new = (1.0 - lr) * hessian + lr * sq_grad_mean
    m_new = mean - lr * (grad + weight_decay * mean) / (h_new + weight_decay)
    return m_new, h_new


def per_sample_sq_grad_mean(model: ModelSpec, theta: np.ndarray, batch: Batch) -> np.ndarray:
    """Mean over the batch of elementwise squared per-sample gradients."""
    if not isinstance(batch, Batch):
        batch = Batch(*batch)
    acc = np.zeros_like(theta)
    for i in range(len(batch)):
        _, g = loss_and_grad(model, theta, Batch(batch.inputs[i : i + 1], batch.labels[i : i + 1]))
        acc += g**2
    return acc / len(batch)


# ---------------------------------------------------------------------------
# Posterior serialization (shared with federation checkpointing).

def posterior_to_record(post: VariationalPosterior) -> dict:
    """JSON-ready record with explicit length and dtype."""
    wd = post.weight_decay
    return {
        "length": int(post.mean.shape[0]),
        "dtype": "float64",
        "mean": post.mean.tolist(),
        "hessian": post.hessian.tolist(),
        "ess": post.ess,
        "weight_decay": float(wd) if np.isscalar(wd) else np.asarray(wd).tolist(),
    }


def posterior_from_record(record: dict) -> VariationalPosterior:
    if record.get("dtype") != "float64":
        raise ValueError(f"unsupported dtype {record.get('dtype')!r}")
    mean = np.asarray(record["mean"], dtype=np.float64)
    hessian = np.asarray(record["hessian"], dtype=np.float64)
    if mean.shape != (int(record["length"]),):
        raise ValueError("record length does not match the stored mean")
    wd = record["weight_decay"]
    if isinstance(wd, list):
        wd = np.asarray(wd, dtype=np.float64)
    return VariationalPosterior(mean, hessian, float(record["ess"]), wd)


def save_posterior(path: str | Path, post: VariationalPosterior) -> None:
    Path(path).write_text(json.dumps(posterior_to_record(post)), encoding="utf-8")


def load_posterior(path: str | Path) -> VariationalPosterior:
    return posterior_from_record(json.loads(Path(path).read_text(encoding="utf-8")))
