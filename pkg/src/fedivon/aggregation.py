"""Server-side fusion of client posteriors.

Clients report (mean, hessian, n_examples).  With example weights
w_k = N_k / sum(N_k) the fused model is the weighted product of
Gaussians whose precisions are carried by the hessians:

    h_global = sum_k w_k * h_k
    m_global = sum_k w_k * h_k * m_k / h_global   (elementwise)

A mean-only weighted average is provided as the baseline rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class ClientContribution:
    """One client's posterior summary plus its training-set size."""

    mean: np.ndarray
    hessian: np.ndarray
    n_examples: int

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.hessian = np.asarray(self.hessian, dtype=np.float64)
        self.n_examples = int(self.n_examples)
        if self.mean.shape != self.hessian.shape:
            raise ValueError("mean and hessian must have the same shape")
        if self.n_examples < 1:
            raise ValueError("n_examples must be positive")
        if np.any(self.hessian < 0):
            raise ValueError("hessian entries must be nonnegative")


@dataclass
class GlobalModel:
    """Aggregated (mean, hessian) pair broadcast to clients each round."""

    mean: np.ndarray
    hessian: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.hessian = np.asarray(self.hessian, dtype=np.float64)
        if self.mean.shape != self.hessian.shape:
            raise ValueError("mean and hessian must have the same shape")
        if np.any(self.hessian < 0) or not np.all(np.isfinite(self.hessian)):
            raise ValueError("global hessian must be finite and nonnegative")
        if not np.all(np.isfinite(self.mean)):
            raise ValueError("global mean must be finite")

    def copy(self) -> "GlobalModel":
        return GlobalModel(self.mean.copy(), self.hessian.copy())


def _weights(counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    return counts / counts.sum()


def aggregate(contribs: Sequence[ClientContribution]) -> GlobalModel:
    """Precision-weighted fusion of client posteriors.

    Coordinates where every client reports zero curvature fall back to
    the plain weighted average of the means (avoids 0/0 and keeps the
    single-client case an exact identity).
    """
    if len(contribs) == 0:
        raise ValueError("cannot aggregate an empty contribution list")
    shape = contribs[0].mean.shape
    for c in contribs:
        if c.mean.shape != shape:
            raise ValueError(f"contribution shape {c.mean.shape} does not match {shape}")
    if len(contribs) == 1:
        # Exact identity; the general path would round (h * m) / h.
        return GlobalModel(contribs[0].mean.copy(), contribs[0].hessian.copy())
    w = _weights([c.n_examples for c in contribs])
    h_global = np.zeros(shape)
    numerator = np.zeros(shape)
    mean_fallback = np.zeros(shape)
    for wk, c in zip(w, contribs):
        h_global += wk * c.hessian
        numerator += wk * c.hessian * c.mean
        mean_fallback += wk * c.mean
    informative = h_global > 0
    m_global = np.where(informative, numerator / np.where(informative, h_global, 1.0), mean_fallback)
    return GlobalModel(m_global, h_global)


def fedavg_aggregate(means: Sequence[tuple[np.ndarray, int]]) -> np.ndarray:
    """Example-count weighted average of client means."""
    if len(means) == 0:
        raise ValueError("cannot aggregate an empty list of means")
    vectors = [np.asarray(m, dtype=np.float64) for m, _ in means]
    shape = vectors[0].shape
    for v in vectors:
        if v.shape != shape:
            raise ValueError(f"mean shape {v.shape} does not match {shape}")
    w = _weights([n for _, n in means])
    out = np.zeros(shape)
    for wk, v in zip(w, vectors):
        out += wk * v
    return out


def product_of_gaussians_density_check(
    contribs: Sequence[ClientContribution], point: np.ndarray, ess: float = 1.0
) -> float:
    """Weighted sum of client log-densities at ``point`` minus the fused log-density.

    Clients are read as Gaussians with precision ess * h_k (the same
    precision convention the aggregation uses), so the fused mean is the
    exact maximizer of the weighted sum.  Test-only diagnostic.
    """
    point = np.asarray(point, dtype=np.float64)
    fused = aggregate(contribs)
    if np.any(fused.hessian <= 0):
        raise ValueError("density check requires positive aggregated curvature")
    w = _weights([c.n_examples for c in contribs])

    def log_density(mean: np.ndarray, hessian: np.ndarray) -> float:
        var = 1.0 / (ess * hessian)
        return float(np.sum(-0.5 * np.log(2.0 * np.pi * var) - (point - mean) ** 2 / (2.0 * var)))

    weighted = 0.0
    for wk, c in zip(w, contribs):
        if np.any(c.hessian <= 0):
            raise ValueError("density check requires positive client curvature")
        weighted += wk * log_density(c.mean, c.hessian)
    return weighted - log_density(fused.mean, fused.hessian)
