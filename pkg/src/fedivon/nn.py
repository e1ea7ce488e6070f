"""Minimal MLP classifier over a flat parameter vector.

The model is a plain multilayer perceptron with softmax cross-entropy
loss.  All parameters live in a single 1-D float64 array so optimizers
and server-side aggregation can treat a model as one vector; layers are
views into that array.  Forward and backward passes are exact, pure
functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture: layer widths (input, hidden..., classes) and activation."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least input and output entries")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer_sizes must all be positive, got {sizes}")
        if sizes[-1] < 2:
            raise ValueError("classifier needs at least 2 classes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class Batch:
    """A minibatch of inputs with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D (B, d), got shape {self.inputs.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.inputs.shape[0]:
            raise ValueError("labels must be 1-D and match the batch size")
        if self.inputs.shape[0] < 1:
            raise ValueError("batch must contain at least one example")
        if np.any(self.labels < 0):
            raise ValueError("labels must be nonnegative class indices")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def param_count(spec: ModelSpec) -> int:
    """Total parameters: sum of (n_in + 1) * n_out over consecutive layers."""
    sizes = spec.layer_sizes
    return sum((n_in + 1) * n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))


def _layer_views(spec: ModelSpec, params: np.ndarray):
    """Yield (W, b) views into the flat vector, layer by layer."""
    offset = 0
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        w = params[offset : offset + n_in * n_out].reshape(n_in, n_out)
        offset += n_in * n_out
        b = params[offset : offset + n_out]
        offset += n_out
        yield w, b


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Fresh flat parameter vector: N(0, 1/fan_in) weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(param_count(spec), dtype=np.float64)
    for w, b in _layer_views(spec, params):
        n_in = w.shape[0]
        w[...] = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=w.shape)
        b[...] = 0.0
    return params


def _check_params(spec: ModelSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    expected = param_count(spec)
    if params.shape != (expected,):
        raise ValueError(f"expected parameter vector of length {expected}, got shape {params.shape}")
    return params


def _hidden_forward(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray):
    """Run all layers, returning pre-activations, activations and logits."""
    act = inputs
    pre_acts, acts = [], [inputs]
    layers = list(_layer_views(spec, params))
    for i, (w, b) in enumerate(layers):
        z = act @ w + b
        pre_acts.append(z)
        if i < len(layers) - 1:
            act = np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)
            acts.append(act)
    return pre_acts, acts, pre_acts[-1]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    # Row-max subtraction keeps exp() in range for arbitrary logits.
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Class probabilities, one row per input; rows sum to 1."""
    params = _check_params(spec, params)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[1] != spec.input_dim:
        raise ValueError(f"inputs have dim {inputs.shape[1]}, model expects {spec.input_dim}")
    if not np.all(np.isfinite(inputs)):
        raise ValueError("non-finite values in inputs")
    _, _, logits = _hidden_forward(spec, params, inputs)
    return np.exp(_log_softmax(logits))


def loss_and_grad(spec: ModelSpec, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its exact gradient.

    Loss is -(1/B) sum_i log p(y_i | x_i, params); the gradient is the
    exact reverse-mode derivative with respect to the flat vector.
    """
    params = _check_params(spec, params)
    if not isinstance(batch, Batch):
        batch = Batch(*batch)
    if batch.inputs.shape[1] != spec.input_dim:
        raise ValueError(f"batch inputs have dim {batch.inputs.shape[1]}, model expects {spec.input_dim}")
    if np.any(batch.labels >= spec.n_classes):
        raise ValueError(f"labels must be < {spec.n_classes}")
    if not np.all(np.isfinite(batch.inputs)):
        raise ValueError("non-finite values in batch inputs")

    n = len(batch)
    pre_acts, acts, logits = _hidden_forward(spec, params, batch.inputs)
    log_probs = _log_softmax(logits)
    per_example = -log_probs[np.arange(n), batch.labels]
    bad = ~np.isfinite(per_example)
    if np.any(bad):
        raise ValueError(f"non-finite loss at batch index {int(np.argmax(bad))}")
    loss = float(per_example.mean())

    grad = np.zeros_like(params)
    grad_views = list(_layer_views(spec, grad))
    param_views = list(_layer_views(spec, params))
    # d(loss)/d(logits) for mean cross-entropy with softmax.
    delta = np.exp(log_probs)
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n
    for i in range(len(grad_views) - 1, -1, -1):
        gw, gb = grad_views[i]
        gw[...] = acts[i].T @ delta
        gb[...] = delta.sum(axis=0)
        if i > 0:
            w, _ = param_views[i]
            upstream = delta @ w.T
            z = pre_acts[i - 1]
            if spec.activation == "relu":
                delta = upstream * (z > 0.0)
            else:
                delta = upstream * (1.0 - np.tanh(z) ** 2)
    return loss, grad
