"""Dense MLP forward/backward passes over a flat parameter vector.

Models are multilayer perceptrons with ReLU hidden activations and a
softmax cross-entropy loss. All parameters of a model live in a single
flat float64 vector; layer matrices are reshaped views into it, which
keeps client/server exchanges and norm computations trivial.

Flat layout, in order, for consecutive layer sizes (n_in, n_out):
weight matrix (n_in x n_out, row-major) followed by its bias (n_out,).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import derive_rng


@dataclass(frozen=True)
class MlpArchitecture:
    """Layer sizes of a dense network: input -> hidden... -> classes."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer sizes must be positive, got {dims}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)


@dataclass(frozen=True)
class Batch:
    """A design matrix plus integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or inputs.shape[0] < 1:
            raise ValueError(f"inputs must be a nonempty 2-D matrix, got shape {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise ValueError(
                f"labels shape {labels.shape} does not match batch size {inputs.shape[0]}"
            )
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def param_count(arch: MlpArchitecture) -> int:
    """Number of scalars in the flat parameter vector of `arch`."""
    sizes = arch.layer_sizes
    return sum(n_in * n_out + n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))


def init_params(arch: MlpArchitecture, seed: int) -> np.ndarray:
    """Seeded initial parameter vector.

    Weights are uniform in +-sqrt(6 / (fan_in + fan_out)); biases are zero.
    """
    rng = derive_rng(seed)
    sizes = arch.layer_sizes
    chunks = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (n_in + n_out))
        chunks.append(rng.uniform(-bound, bound, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return np.concatenate(chunks)


def unflatten(arch: MlpArchitecture, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of (weight, bias) per layer into the flat vector `w`."""
    w = np.asarray(w)
    expected = param_count(arch)
    if w.shape != (expected,):
        raise ValueError(f"parameter vector has shape {w.shape}, expected ({expected},)")
    layers = []
    offset = 0
    sizes = arch.layer_sizes
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weight = w[offset : offset + n_in * n_out].reshape(n_in, n_out)
        offset += n_in * n_out
        bias = w[offset : offset + n_out]
        offset += n_out
        layers.append((weight, bias))
    return layers


def _check_batch(arch: MlpArchitecture, batch: Batch) -> None:
    if batch.inputs.shape[1] != arch.input_dim:
        raise ValueError(
            f"batch input dim {batch.inputs.shape[1]} does not match "
            f"architecture input dim {arch.input_dim}"
        )
    if batch.labels.min() < 0 or batch.labels.max() >= arch.output_dim:
        raise ValueError(f"labels must lie in [0, {arch.output_dim})")


def _forward(arch, w, batch):
    """Forward pass keeping intermediate activations for backprop.

    Returns (activations, logits) where activations[i] is the input to
    layer i (activations[0] is the batch itself).
    """
    layers = unflatten(arch, w)
    acts = [batch.inputs]
    h = batch.inputs
    for weight, bias in layers[:-1]:
        h = np.maximum(h @ weight + bias, 0.0)
        acts.append(h)
    weight, bias = layers[-1]
    logits = h @ weight + bias
    return acts, logits


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-logit subtraction."""
    return np.exp(_log_softmax(np.asarray(logits, dtype=np.float64)))


def _mean_cross_entropy(logits, labels):
    log_probs = _log_softmax(logits)
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def forward_loss(arch: MlpArchitecture, w: np.ndarray, batch: Batch) -> float:
    """Mean softmax cross-entropy of the model on `batch`."""
    _check_batch(arch, batch)
    _, logits = _forward(arch, w, batch)
    return _mean_cross_entropy(logits, batch.labels)


def forward_logits(arch: MlpArchitecture, w: np.ndarray, batch_inputs: np.ndarray) -> np.ndarray:
    """Raw class scores for a matrix of inputs."""
    inputs = np.ascontiguousarray(batch_inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != arch.input_dim:
        raise ValueError(
            f"inputs shape {inputs.shape} does not match architecture input dim {arch.input_dim}"
        )
    layers = unflatten(arch, w)
    h = inputs
    for weight, bias in layers[:-1]:
        h = np.maximum(h @ weight + bias, 0.0)
    weight, bias = layers[-1]
    return h @ weight + bias


def backward(arch: MlpArchitecture, w: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient with respect to every parameter.

    The gradient is of the mean-over-batch cross-entropy, laid out in the
    same flat order as the parameter vector.
    """
    _check_batch(arch, batch)
    layers = unflatten(arch, w)
    acts, logits = _forward(arch, w, batch)
    loss = _mean_cross_entropy(logits, batch.labels)

    n = len(batch)
    delta = softmax_probs(logits)
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    grad = np.empty_like(np.asarray(w, dtype=np.float64))
    grad_layers = unflatten(arch, grad)
    for i in range(len(layers) - 1, -1, -1):
        g_weight, g_bias = grad_layers[i]
        np.matmul(acts[i].T, delta, out=g_weight)
        g_bias[:] = delta.sum(axis=0)
        if i > 0:
            # ReLU pass-through: activations are zero exactly where the
            # pre-activation was clamped.
            delta = (delta @ layers[i][0].T) * (acts[i] > 0.0)
    return loss, grad


def vector_norm(v: np.ndarray) -> float:
    """Euclidean norm of a flat vector."""
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))


def axpy(w: np.ndarray, g: np.ndarray, eta: float) -> np.ndarray:
    """Gradient step w - eta * g."""
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if w.shape != g.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {g.shape}")
    return w - eta * g
