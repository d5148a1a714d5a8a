"""Small feedforward ReLU classifier with exact backprop and momentum SGD.

All arithmetic is float64. The private ``_forward``, ``_loss_and_backward`` and ``_sgd_update``
helpers accept parameter arrays with an optional leading "model" axis, so the
same code trains one network or a stack of independent networks in lockstep
(used by the memorization estimator, which trains hundreds of small models).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, InputError, ShapeError

DTYPE = np.float64


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    epochs_per_task: int = 50
    batch_size: int = 32
    lr_drop_epochs: tuple[int, ...] = (35, 45)
    lr_drop_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be nonnegative")
        if self.epochs_per_task < 1:
            raise ConfigurationError("epochs_per_task must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if not self.lr_drop_factor > 0:
            raise ConfigurationError("lr_drop_factor must be positive")
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConfigurationError("lr_drop_epochs must be strictly increasing")
        if any(e < 0 or e >= self.epochs_per_task for e in drops):
            raise ConfigurationError("lr_drop_epochs must lie in [0, epochs_per_task)")

    @classmethod
    def stationary(cls, **overrides) -> "TrainConfig":
        """Defaults for non-incremental training (momentum 0.9, weight decay 1e-6)."""
        base = dict(momentum=0.9, weight_decay=1e-6)
        base.update(overrides)
        return cls(**base)

    def with_epochs(self, epochs: int) -> "TrainConfig":
        """Same schedule shape compressed/stretched to ``epochs`` epochs."""
        old = self.epochs_per_task
        drops = sorted({int(round(e * epochs / old)) for e in self.lr_drop_epochs})
        drops = tuple(e for e in drops if 0 < e < epochs)
        return replace(self, epochs_per_task=epochs, lr_drop_epochs=drops)

    def lr_at(self, epoch: int) -> float:
        return lr_at(self, epoch)


def lr_at(config: TrainConfig, epoch: int) -> float:
    n_drops = sum(1 for e in config.lr_drop_epochs if e <= epoch)
    return config.learning_rate * config.lr_drop_factor**n_drops


@dataclass
class ModelParams:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    velocity_weights: list[np.ndarray] = field(default_factory=list)
    velocity_biases: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.velocity_weights:
            self.velocity_weights = [np.zeros_like(w) for w in self.weights]
        if not self.velocity_biases:
            self.velocity_biases = [np.zeros_like(b) for b in self.biases]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def momentum_state(self) -> list[np.ndarray]:
        return [*self.velocity_weights, *self.velocity_biases]

    def copy(self) -> "ModelParams":
        return ModelParams(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [v.copy() for v in self.velocity_weights],
            [v.copy() for v in self.velocity_biases],
        )

    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def is_finite(self) -> bool:
        arrays = [*self.weights, *self.biases, *self.momentum_state]
        return all(np.isfinite(a).all() for a in arrays)

    def to_bytes(self) -> bytes:
        arrays = [*self.weights, *self.biases, *self.momentum_state]
        return b"".join(np.ascontiguousarray(a).tobytes() for a in arrays)


class Grads(NamedTuple):
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def _check_dims(layer_dims: Sequence[int]) -> list[int]:
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigurationError(f"invalid layer_dims {list(layer_dims)!r}")
    return dims


def _init_arrays(dims: list[int], rng: np.random.Generator):
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(DTYPE))
        biases.append(np.zeros(fan_out, dtype=DTYPE))
    return weights, biases


def init_network(layer_dims: Sequence[int], seed: int) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, zero velocity."""
    dims = _check_dims(layer_dims)
    weights, biases = _init_arrays(dims, np.random.default_rng(seed))
    return ModelParams(dims, weights, biases)


# -- stack-aware kernels ---------------------------------------------------


def _forward(weights, biases, x):
    """Returns (layer inputs, logits). ``layer inputs[-1]`` is the penultimate activation."""
    inputs = [x]
    h = x
    last = len(weights) - 1
    for l, (w, b) in enumerate(zip(weights, biases)):
        z = h @ np.swapaxes(w, -1, -2) + b[..., None, :]
        if l == last:
            return inputs, z
        h = np.maximum(z, 0.0)
        inputs.append(h)
    raise AssertionError("unreachable")


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _loss_and_backward(weights, biases, x, labels):
    inputs, logits = _forward(weights, biases, x)
    logp = _log_softmax(logits)
    rows = labels.shape[-1]
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = -picked.mean(axis=-1)

    delta = np.exp(logp)
    np.put_along_axis(
        delta, labels[..., None],
        np.take_along_axis(delta, labels[..., None], axis=-1) - 1.0, axis=-1,
    )
    delta /= rows
    grad_w = [None] * len(weights)
    grad_b = [None] * len(weights)
    for l in range(len(weights) - 1, -1, -1):
        grad_w[l] = np.swapaxes(delta, -1, -2) @ inputs[l]
        grad_b[l] = delta.sum(axis=-2)
        if l > 0:
            delta = (delta @ weights[l]) * (inputs[l] > 0)
    return loss, grad_w, grad_b, logits


def _sgd_update(params, grads_w, grads_b, lr, momentum, weight_decay):
    """In-place update of (weights, biases, velocity_w, velocity_b) lists."""
    weights, biases, vel_w, vel_b = params
    for p, v, g in zip([*weights, *biases], [*vel_w, *vel_b], [*grads_w, *grads_b]):
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


# -- public single-model API -----------------------------------------------


def _as_batch(params: ModelParams, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != params.layer_dims[0]:
        raise ShapeError(
            f"batch shape {x.shape} does not match input dim {params.layer_dims[0]}"
        )
    return x


def forward(params: ModelParams, batch) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(logits, features)``; features are the penultimate ReLU activations."""
    x = _as_batch(params, batch)
    inputs, logits = _forward(params.weights, params.biases, x)
    return logits, inputs[-1]


def predict(params: ModelParams, batch) -> np.ndarray:
    logits, _ = forward(params, batch)
    return logits.argmax(axis=1)


def _as_labels(params: ModelParams, labels, rows: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (rows,):
        raise ShapeError(f"labels shape {y.shape} does not match {rows} rows")
    if y.size and (y.min() < 0 or y.max() >= params.num_classes):
        raise InputError(f"labels must lie in [0, {params.num_classes})")
    return y


def loss_and_grads(params: ModelParams, batch, labels) -> tuple[float, Grads]:
    """Mean softmax cross-entropy over the batch and its exact gradients."""
    x = _as_batch(params, batch)
    y = _as_labels(params, labels, x.shape[0])
    loss, gw, gb, _ = _loss_and_backward(params.weights, params.biases, x, y)
    return float(loss), Grads(gw, gb)


def sgd_step(params: ModelParams, grads: Grads, config: TrainConfig, epoch: int) -> ModelParams:
    for p, g in zip([*params.weights, *params.biases], [*grads.weights, *grads.biases]):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    out = params.copy()
    _sgd_update(
        (out.weights, out.biases, out.velocity_weights, out.velocity_biases),
        grads.weights, grads.biases,
        lr_at(config, epoch), config.momentum, config.weight_decay,
    )
    return out


def train_epochs(
    params: ModelParams,
    features,
    labels,
    config: TrainConfig,
    rng: np.random.Generator,
    observer=None,
) -> ModelParams:
    """Plain minibatch SGD over a fixed dataset (stationary training).

    ``observer(iteration, batch_indices, logits)`` is called with the
    pre-update logits of every minibatch.
    """
    x = np.asarray(features, dtype=DTYPE)
    y = _as_labels(params, labels, x.shape[0])
    out = params.copy()
    state = (out.weights, out.biases, out.velocity_weights, out.velocity_biases)
    iteration = 0
    for epoch in range(config.epochs_per_task):
        lr = lr_at(config, epoch)
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], config.batch_size):
            idx = order[start:start + config.batch_size]
            _, gw, gb, logits = _loss_and_backward(out.weights, out.biases, x[idx], y[idx])
            if observer is not None:
                observer(iteration, idx, logits)
            _sgd_update(state, gw, gb, lr, config.momentum, config.weight_decay)
            iteration += 1
    return out


def train_many(
    layer_dims: Sequence[int],
    features,
    labels,
    subsets: np.ndarray,
    seeds: Sequence[int],
    config: TrainConfig,
) -> np.ndarray:
    """Train one network per row of ``subsets`` (index array of shape (u, k)) in lockstep.

    Model ``j`` is initialised and shuffled from ``seeds[j]`` alone, so its result
    does not depend on which other models share the stack. Returns softmax
    probabilities on every sample, shape (u, n, classes).
    """
    dims = _check_dims(layer_dims)
    x = np.asarray(features, dtype=DTYPE)
    y = np.asarray(labels, dtype=np.int64)
    subsets = np.asarray(subsets, dtype=np.int64)
    u, k = subsets.shape
    rngs = [np.random.default_rng(s) for s in seeds]
    inits = [_init_arrays(dims, r) for r in rngs]
    weights = [np.stack([w[l] for w, _ in inits]) for l in range(len(dims) - 1)]
    biases = [np.stack([b[l] for _, b in inits]) for l in range(len(dims) - 1)]
    state = (weights, biases, [np.zeros_like(w) for w in weights], [np.zeros_like(b) for b in biases])
    for epoch in range(config.epochs_per_task):
        lr = lr_at(config, epoch)
        order = np.stack([subsets[j, r.permutation(k)] for j, r in enumerate(rngs)])
        for start in range(0, k, config.batch_size):
            idx = order[:, start:start + config.batch_size]
            _, gw, gb, _ = _loss_and_backward(weights, biases, x[idx], y[idx])
            _sgd_update(state, gw, gb, lr, config.momentum, config.weight_decay)
    _, logits = _forward(weights, biases, np.broadcast_to(x, (u, *x.shape)))
    return np.exp(_log_softmax(logits))
