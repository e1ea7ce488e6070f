"""Predictive evaluation: MC-averaged predictions and scalar metrics.

Covers accuracy, negative log-likelihood, Brier score, expected
calibration error with its reliability-diagram decomposition, predictive
entropy, and an exact rank-based AUROC for entropy-scored OOD detection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .ivon import VariationalPosterior, sample_theta
from .nn import ModelSpec, forward
from .seeding import as_rng

NLL_FLOOR = 1e-12


@dataclass
class PredictiveBatch:
    """Predicted class probabilities with the true labels."""

    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 2 or self.labels.shape != (self.probs.shape[0],):
            raise ValueError("probs must be (N, C) with one label per row")
        if self.probs.shape[0] < 1:
            raise ValueError("need at least one prediction")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("probability rows must sum to 1 within 1e-6")
        if np.any(self.labels < 0) or np.any(self.labels >= self.probs.shape[1]):
            raise ValueError("labels out of range for the probability rows")

    def __len__(self) -> int:
        return self.probs.shape[0]


@dataclass
class ReliabilityBins:
    """Equal-width confidence bins; the weighted gaps recompose the ECE."""

    lower: np.ndarray
    upper: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray
    count: np.ndarray

    @property
    def n_total(self) -> int:
        return int(self.count.sum())

    def ece(self) -> float:
        weights = self.count / max(self.n_total, 1)
        return float(np.sum(weights * np.abs(self.accuracy - self.mean_confidence)))


def mc_predict(
    posterior: VariationalPosterior,
    spec: ModelSpec,
    inputs: np.ndarray,
    n_samples: int,
    rng: np.random.Generator | int = 0,
    labels: Optional[np.ndarray] = None,
) -> np.ndarray | PredictiveBatch:
    """Predictive probabilities averaged over posterior samples.

    ``n_samples=0`` evaluates at the posterior mean (the point-estimate
    variant); otherwise the forward passes of n_samples drawn parameter
    vectors are averaged.  Returns a PredictiveBatch when labels are
    supplied, else the raw probability matrix.
    """
    if n_samples < 0:
        raise ValueError("n_samples must be nonnegative")
    inputs = np.asarray(inputs, dtype=np.float64)
    if n_samples == 0:
        probs = forward(spec, posterior.mean, inputs)
    else:
        rng = as_rng(rng)
        acc = np.zeros((inputs.shape[0], spec.n_classes))
        for _ in range(n_samples):
            acc += forward(spec, sample_theta(posterior, rng), inputs)
        probs = acc / n_samples
    if labels is None:
        return probs
    return PredictiveBatch(probs, labels)


def accuracy(pred: PredictiveBatch) -> float:
    """Fraction of rows whose argmax matches the label (ties to lowest index)."""
    return float(np.mean(pred.probs.argmax(axis=1) == pred.labels))


def nll(pred: PredictiveBatch) -> float:
    """Mean negative log-likelihood with probabilities floored at 1e-12."""
    picked = pred.probs[np.arange(len(pred)), pred.labels]
    return float(-np.mean(np.log(np.maximum(picked, NLL_FLOOR))))


def brier(pred: PredictiveBatch) -> float:
    """Mean squared distance between probability rows and one-hot labels."""
    one_hot = np.zeros_like(pred.probs)
    one_hot[np.arange(len(pred)), pred.labels] = 1.0
    return float(np.mean(np.sum((pred.probs - one_hot) ** 2, axis=1)))


def _bin_index(confidence: np.ndarray, n_bins: int) -> np.ndarray:
    # Boundary values go to the higher bin; 1.0 stays in the last bin.
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    return np.clip(np.digitize(confidence, edges) - 1, 0, n_bins - 1)


def reliability_bins(pred: PredictiveBatch, n_bins: int) -> ReliabilityBins:
    """Per-bin confidence/accuracy decomposition on max-probability confidence."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    confidence = pred.probs.max(axis=1)
    correct = (pred.probs.argmax(axis=1) == pred.labels).astype(np.float64)
    idx = _bin_index(confidence, n_bins)
    count = np.bincount(idx, minlength=n_bins).astype(np.int64)
    conf_sum = np.bincount(idx, weights=confidence, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    nonzero = np.maximum(count, 1)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    return ReliabilityBins(
        lower=edges[:-1],
        upper=edges[1:],
        mean_confidence=np.where(count > 0, conf_sum / nonzero, 0.0),
        accuracy=np.where(count > 0, acc_sum / nonzero, 0.0),
        count=count,
    )


def ece(pred: PredictiveBatch, n_bins: int = 10) -> float:
    """Expected calibration error over equal-width confidence bins."""
    return reliability_bins(pred, n_bins).ece()


def predictive_entropy(pred: PredictiveBatch | np.ndarray) -> np.ndarray:
    """Shannon entropy of each probability row, with 0 * log 0 = 0."""
    probs = pred.probs if isinstance(pred, PredictiveBatch) else np.asarray(pred, dtype=np.float64)
    terms = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return -terms.sum(axis=1)


def auroc(scores_positive: np.ndarray, scores_negative: np.ndarray) -> float:
    """Exact P(pos > neg) + 0.5 P(pos = neg) via midrank statistics."""
    pos = np.asarray(scores_positive, dtype=np.float64)
    neg = np.asarray(scores_negative, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both score sets must be nonempty")
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))
