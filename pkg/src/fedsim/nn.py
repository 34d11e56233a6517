"""Dense feed-forward classifier with exact gradients.

Everything here is plain float64 numpy so that local training is
bit-reproducible given a seed. The model is a stack of fully connected
layers with ReLU activations on hidden layers and a linear output layer;
training minimizes softmax cross-entropy with mini-batch first-order
updates (plain SGD, SGD with momentum, or Adam), optionally with a
proximal pull toward the round-start parameters.

Parameters live in a single flat vector; per-layer weight matrices and
bias vectors are reshaped views into it. The output-layer bias occupies
the trailing slice, which is what the update-based heterogeneity
estimator consumes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError

OPTIMIZERS = ("sgd", "sgd_momentum", "adam")

# cross-entropy clamps the true-class probability at this floor so that a
# fully confident wrong prediction yields a large finite loss
PROB_FLOOR = 1e-12


def layer_param_count(layer_sizes: Sequence[int]) -> int:
    """Number of scalar parameters for the given layer widths."""
    total = 0
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        total += fan_out * fan_in + fan_out
    return total


@dataclass
class MlpModel:
    """Feed-forward network with parameters stored as one flat vector.

    layer_sizes is (input_dim, hidden..., num_classes). A model with no
    hidden widths is a single linear layer followed by softmax, which the
    estimator oracles rely on. Layer views share memory with ``theta``:
    in-place updates to the flat vector update the layers and vice versa.
    """

    layer_sizes: tuple[int, ...]
    theta: np.ndarray

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ConfigError("layer_sizes needs at least input and output widths")
        if any(int(w) < 1 for w in self.layer_sizes):
            raise ConfigError(f"layer widths must be positive, got {self.layer_sizes}")
        if self.layer_sizes[-1] < 2:
            raise ConfigError("output layer needs at least 2 classes")
        expected = layer_param_count(self.layer_sizes)
        if self.theta.shape != (expected,):
            raise ConfigError(
                f"flat parameter vector has shape {self.theta.shape}, expected ({expected},)"
            )
        if self.theta.dtype != np.float64:
            raise ConfigError("parameters must be float64")

    @classmethod
    def init(cls, layer_sizes: Sequence[int], seed) -> "MlpModel":
        """Draw each layer uniformly from +-1/sqrt(fan_in)."""
        sizes = tuple(int(w) for w in layer_sizes)
        rng = np.random.default_rng(seed)
        chunks = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=fan_out * fan_in + fan_out))
        return cls(sizes, np.concatenate(chunks))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_params(self) -> int:
        return self.theta.size

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weight, bias) views per layer; weight has shape (out, in)."""
        out = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = self.theta[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in)
            offset += fan_out * fan_in
            b = self.theta[offset : offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out

    def output_bias(self) -> np.ndarray:
        """View of the trailing output-layer bias slice."""
        return self.theta[-self.num_classes :]

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_sizes, self.theta.copy())


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-stable softmax along the last axis."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def forward(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """Logits for a batch of feature rows, shape (n, num_classes)."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != model.input_dim:
        raise ConfigError(
            f"feature dim {x.shape[1]} does not match model input dim {model.input_dim}"
        )
    h = x
    layers = model.layers()
    for w, b in layers[:-1]:
        h = np.maximum(h @ w.T + b, 0.0)
    w, b = layers[-1]
    return h @ w.T + b


def ce_loss(probs: np.ndarray, label: int) -> float:
    """Cross-entropy of one softmax row against an integer label."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise DomainError(f"label {label} outside [0, {probs.shape[-1]})")
    return float(-np.log(max(probs[label], PROB_FLOOR)))


def bias_grad_closed_form(probs: np.ndarray, label: int) -> np.ndarray:
    """Output-bias gradient of cross-entropy: softmax minus one-hot label.

    The true-class component is probs[label] - 1 (negative), every other
    component is its softmax probability (non-negative), and the vector
    sums to zero.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise DomainError(f"label {label} outside [0, {probs.shape[-1]})")
    grad = probs.copy()
    grad[label] -= 1.0
    return grad


def batch_gradient(
    model: MlpModel, features: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its flat parameter gradient."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64).ravel()
    n = x.shape[0]
    if n == 0:
        raise DomainError("cannot take a gradient over an empty batch")
    if y.shape[0] != n:
        raise ConfigError(f"{n} feature rows but {y.shape[0]} labels")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise DomainError("labels outside the model's class range")

    layers = model.layers()
    # forward pass, caching post-activation values per layer
    acts = [x]
    h = x
    for w, b in layers[:-1]:
        h = np.maximum(h @ w.T + b, 0.0)
        acts.append(h)
    w_last, b_last = layers[-1]
    logits = h @ w_last.T + b_last
    probs = softmax(logits)
    picked = np.clip(probs[np.arange(n), y], PROB_FLOOR, None)
    loss = float(np.mean(-np.log(picked)))

    # backward pass; d holds dLoss/dlogits of the current layer
    d = probs.copy()
    d[np.arange(n), y] -= 1.0
    d /= n
    grads: list[np.ndarray] = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append(d.sum(axis=0))  # bias
        grads.append((d.T @ acts[i]).ravel())  # weight
        if i > 0:
            d = (d @ w) * (acts[i] > 0.0)
    return loss, np.concatenate(grads[::-1])


@dataclass(frozen=True)
class TrainConfig:
    """Local training hyperparameters for one client round."""

    learning_rate: float = 0.01
    local_epochs: int = 2
    batch_size: int = 32
    optimizer: str = "sgd"
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    prox_mu: float = 0.0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(
                f"unknown optimizer {self.optimizer!r}, expected one of {OPTIMIZERS}"
            )
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.prox_mu < 0:
            raise ConfigError(f"prox_mu must be >= 0, got {self.prox_mu}")


@dataclass
class LocalUpdate:
    """Result of one client's local training pass.

    delta is the flat parameter displacement (end minus start); delta_bias
    is exactly its trailing output-bias slice. train_loss is the mean
    cross-entropy observed over the final local epoch, measured at each
    mini-batch's pre-step iterate.
    """

    delta: np.ndarray
    delta_bias: np.ndarray
    train_loss: float


class _Optimizer:
    """First-order step rules sharing a flat-vector interface."""

    def __init__(self, cfg: TrainConfig, dim: int):
        self.cfg = cfg
        self.step_count = 0
        if cfg.optimizer == "sgd_momentum":
            self.buf = np.zeros(dim)
        elif cfg.optimizer == "adam":
            self.m = np.zeros(dim)
            self.v = np.zeros(dim)

    def direction(self, grad: np.ndarray) -> np.ndarray:
        """Vector the parameters move against, already preconditioned."""
        self.step_count += 1
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            return grad
        if cfg.optimizer == "sgd_momentum":
            # first step seeds the buffer with the raw gradient, later steps
            # blend with weight (1 - momentum)
            if self.step_count == 1:
                self.buf = grad.copy()
            else:
                self.buf = cfg.momentum * self.buf + (1.0 - cfg.momentum) * grad
            return self.buf
        self.m = cfg.adam_beta1 * self.m + (1.0 - cfg.adam_beta1) * grad
        self.v = cfg.adam_beta2 * self.v + (1.0 - cfg.adam_beta2) * grad * grad
        m_hat = self.m / (1.0 - cfg.adam_beta1**self.step_count)
        v_hat = self.v / (1.0 - cfg.adam_beta2**self.step_count)
        return m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def local_update(model: MlpModel, dataset, cfg: TrainConfig, rng_seed) -> LocalUpdate:
    """Run one client's local pass and return its parameter displacement.

    The dataset must expose float64 ``features`` (n, d) and integer
    ``labels`` (n,). Each epoch reshuffles with the stream seeded by
    rng_seed; the final short mini-batch is kept and averaged over its
    actual size. For plain SGD with prox_mu 0 the returned delta_bias is
    exactly minus the learning rate times the sum of per-step mini-batch
    mean bias gradients.
    """
    cfg.validate()
    features = np.asarray(dataset.features, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    n = features.shape[0]
    if n == 0:
        raise DomainError("local_update needs a non-empty dataset")
    rng = np.random.default_rng(rng_seed)
    local = model.copy()
    theta_start = model.theta.copy()
    opt = _Optimizer(cfg, local.num_params)
    final_epoch_loss = 0.0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grad = batch_gradient(local, features[idx], labels[idx])
            if cfg.prox_mu > 0.0:
                grad = grad + cfg.prox_mu * (local.theta - theta_start)
            local.theta -= cfg.learning_rate * opt.direction(grad)
            loss_sum += loss * idx.size
        final_epoch_loss = loss_sum / n
    delta = local.theta - theta_start
    c = model.num_classes
    return LocalUpdate(delta=delta, delta_bias=delta[-c:].copy(), train_loss=final_epoch_loss)
