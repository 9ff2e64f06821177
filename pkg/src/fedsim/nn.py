"""Dense feed-forward network substrate.

Forward pass, softmax cross-entropy, exact backpropagation, and lossless
round-tripping between structured models and flat parameter vectors. The
same substrate serves both the task classifiers and the weighting agent,
so everything is float64 and every operation is a pure function: identical
inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class Architecture:
    """Layer widths (input, hidden..., output) and the hidden activation.

    The output layer emits raw logits; the softmax lives inside the loss.
    """

    layer_dims: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 2:
            raise ValueError("need at least an input and an output dimension")
        if min(self.layer_dims) < 1:
            raise ValueError(f"layer dims must be >= 1, got {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def param_count(self) -> int:
        return sum(i * o + o for i, o in zip(self.layer_dims, self.layer_dims[1:]))

    def layout(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, offset) for each parameter block, in flat-vector order."""
        blocks: list[tuple[str, tuple[int, ...], int]] = []
        offset = 0
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_dims, self.layer_dims[1:])):
            blocks.append((f"w{i}", (fan_in, fan_out), offset))
            offset += fan_in * fan_out
            blocks.append((f"b{i}", (fan_out,), offset))
            offset += fan_out
        return blocks


@dataclass
class MLPModel:
    """A dense network: per-layer weight matrices (fan_in x fan_out) and biases.

    Treated as an immutable value; training code produces new models by
    round-tripping through flat parameter vectors.
    """

    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        dims = self.arch.layer_dims
        if len(self.weights) != self.arch.n_layers or len(self.biases) != self.arch.n_layers:
            raise ValueError("layer count does not match architecture")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]):
                raise ValueError(
                    f"layer {i} weights have shape {w.shape}, expected {(dims[i], dims[i + 1])}"
                )
            if b.shape != (dims[i + 1],):
                raise ValueError(
                    f"layer {i} bias has shape {b.shape}, expected {(dims[i + 1],)}"
                )


@dataclass
class Batch:
    """A mini-batch: float64 feature rows plus integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.inputs.shape[0]:
            raise ValueError("labels must be a vector aligned with the input rows")
        if self.inputs.shape[0] == 0:
            raise ValueError("empty batch")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def init_model(
    arch: Architecture,
    rng: np.random.Generator,
    zero_output_layer: bool = False,
) -> MLPModel:
    """Glorot-uniform weights, zero biases, drawn from a seeded generator.

    `zero_output_layer` zeroes the last weight matrix so a fresh model emits
    all-zero logits (used by the weighting agent for a uniform cold start).
    """
    dims = arch.layer_dims
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        if zero_output_layer and i == arch.n_layers - 1:
            w = np.zeros((fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MLPModel(arch, weights, biases)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def _forward_cached(model: MLPModel, inputs: np.ndarray):
    """Forward pass keeping per-layer pre-activations and layer inputs."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise ValueError(
            f"inputs have shape {x.shape}, expected (*, {model.arch.input_dim})"
        )
    layer_inputs = [x]
    pre_acts = []
    n_layers = model.arch.n_layers
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = layer_inputs[-1] @ w + b
        pre_acts.append(z)
        if i < n_layers - 1:
            layer_inputs.append(_activate(z, model.arch.activation))
    logits = pre_acts[-1]
    return logits, layer_inputs, pre_acts


def forward(model: MLPModel, inputs: np.ndarray) -> np.ndarray:
    """Compute raw logits (examples x output_dim) for a batch of inputs."""
    logits, _, _ = _forward_cached(model, inputs)
    return logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max-subtraction stabilization."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the true classes under softmax(logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= logits.shape[1]:
        raise ValueError(
            f"labels must lie in [0, {logits.shape[1]}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def backprop_logits(model: MLPModel, inputs: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Backpropagate an arbitrary upstream gradient at the logits.

    Returns the flat gradient d(objective)/d(params) in `to_params` order.
    Shared by the cross-entropy loss and by custom objectives such as the
    weighting agent's reward-weighted regression.
    """
    _, layer_inputs, pre_acts = _forward_cached(model, inputs)
    grads_w = [None] * model.arch.n_layers
    grads_b = [None] * model.arch.n_layers
    delta = np.asarray(dlogits, dtype=np.float64)
    for i in range(model.arch.n_layers - 1, -1, -1):
        grads_w[i] = layer_inputs[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * _activate_grad(
                pre_acts[i - 1], model.arch.activation
            )
    flat = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(grads_w, grads_b)])
    return flat


def backward(model: MLPModel, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy loss and its exact gradient w.r.t. all parameters."""
    logits, layer_inputs, pre_acts = _forward_cached(model, batch.inputs)
    loss = cross_entropy(logits, batch.labels)
    n = len(batch)
    probs = softmax(logits)
    dlogits = probs
    dlogits[np.arange(n), batch.labels] -= 1.0
    dlogits /= n

    grads_w = [None] * model.arch.n_layers
    grads_b = [None] * model.arch.n_layers
    delta = dlogits
    for i in range(model.arch.n_layers - 1, -1, -1):
        grads_w[i] = layer_inputs[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * _activate_grad(
                pre_acts[i - 1], model.arch.activation
            )
    flat = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(grads_w, grads_b)])
    if not np.isfinite(flat).all():
        raise FloatingPointError("non-finite gradient")
    return loss, flat


def to_params(model: MLPModel) -> np.ndarray:
    """Flatten all parameters into one float64 vector (layer order, weights then bias)."""
    return np.concatenate(
        [np.concatenate([w.ravel(), b]) for w, b in zip(model.weights, model.biases)]
    )


def from_params(arch: Architecture, params: np.ndarray) -> MLPModel:
    """Rebuild a model from a flat vector; exact inverse of `to_params`."""
    params = np.asarray(params, dtype=np.float64)
    expected = arch.param_count()
    if params.shape != (expected,):
        raise ValueError(
            f"parameter vector has shape {params.shape}, expected ({expected},) "
            f"for architecture {arch.layer_dims}"
        )
    weights, biases = [], []
    offset = 0
    for fan_in, fan_out in zip(arch.layer_dims, arch.layer_dims[1:]):
        weights.append(params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        offset += fan_in * fan_out
        biases.append(params[offset : offset + fan_out].copy())
        offset += fan_out
    return MLPModel(arch, weights, biases)


def finite_diff_grad(model: MLPModel, batch: Batch, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time.

    Test oracle only: O(P) full forward passes, independent of `backward`.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = to_params(model)
    grad = np.zeros_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + eps
        loss_plus = cross_entropy(forward(from_params(model.arch, bumped), batch.inputs), batch.labels)
        bumped[i] = base[i] - eps
        loss_minus = cross_entropy(forward(from_params(model.arch, bumped), batch.inputs), batch.labels)
        grad[i] = (loss_plus - loss_minus) / (2.0 * eps)
    return grad
