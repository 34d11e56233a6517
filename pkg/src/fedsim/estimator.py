"""Label-skew estimation from output-layer bias movement.

During federated training the output-layer bias of a softmax classifier
drifts toward the classes a client actually holds: the expected bias
displacement after local training is eta * epochs * (D_i * sum(e) - e_i)
where D is the client's label distribution and e_i averages the softmax
mass that class i receives on samples of other classes. Feeding the
observed displacement through a low-temperature softmax and taking its
Shannon entropy therefore estimates how balanced the client's labels
are, using only a num_classes-sized vector. This module implements that
estimator, its closed-form expectation, a lower bound on the estimate
gap between a balanced and a skewed client, and the exponential
envelope diagnostic relating label entropy to client gradient drift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClientDataset, entropy_nats
from .errors import ConfigError, DomainError
from .nn import MlpModel, batch_gradient, forward, softmax


@dataclass(frozen=True)
class EstimatorConfig:
    """Softmax temperature applied to bias displacements before entropy."""

    temperature: float = 0.0025

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class BiasUpdateRecord:
    """Server-side cache entry: one client's last seen bias displacement."""

    client_id: int
    delta_bias: np.ndarray
    last_updated_round: int = 0


def estimate_entropy(delta_bias: np.ndarray, cfg: EstimatorConfig) -> float:
    """Entropy of the temperature-softmaxed bias displacement.

    Invariant to adding a constant to every component; bounded by
    [0, ln(num_classes)]. Low values flag clients whose bias moved
    sharply toward a few classes, i.e. skewed local labels.
    """
    cfg.validate()
    db = np.asarray(delta_bias, dtype=np.float64)
    if db.ndim != 1 or db.size < 2:
        raise ConfigError(f"delta_bias must be a vector of >= 2 classes, got {db.shape}")
    return entropy_nats(softmax(db / cfg.temperature))


@dataclass(frozen=True)
class ConfusionAverages:
    """Mean off-label softmax mass per class, with its spread.

    e[i] averages softmax component i over samples whose label is not i;
    delta_spread is the largest deviation of any e[i] from their mean.
    """

    e: np.ndarray
    delta_spread: float


def confusion_averages(model: MlpModel, dataset: ClientDataset) -> ConfusionAverages:
    """Measure per-class off-label softmax averages on a probe dataset."""
    if dataset.num_samples == 0:
        raise DomainError("confusion_averages needs a non-empty dataset")
    counts = dataset.class_counts()
    if np.any(counts == dataset.num_samples):
        raise DomainError(
            "confusion_averages needs at least two label values present"
        )
    probs = softmax(forward(model, dataset.features))
    c = model.num_classes
    e = np.empty(c)
    for i in range(c):
        mask = dataset.labels != i
        e[i] = probs[mask, i].mean()
    return ConfusionAverages(e=e, delta_spread=float(np.max(np.abs(e.mean() - e))))


def expected_bias_update(
    dist: np.ndarray, conf: ConfusionAverages, lr: float, epochs: int
) -> np.ndarray:
    """Closed-form expectation of the bias displacement per class.

    Component i is lr * epochs * (dist[i] * sum(e) - e[i]); the vector
    sums to zero whenever dist sums to one.
    """
    d = np.asarray(dist, dtype=np.float64)
    if d.shape != conf.e.shape:
        raise ConfigError(f"dist shape {d.shape} != e shape {conf.e.shape}")
    return lr * epochs * (d * conf.e.sum() - conf.e)


def entropy_gap_lower_bound(
    dist_u: np.ndarray,
    dist_k: np.ndarray,
    conf: ConfusionAverages,
    lr: float,
    epochs: int,
    temperature: float,
) -> float:
    """Lower bound on the expected entropy-estimate gap between clients.

    dist_u plays the balanced reference, dist_k the skewed client. The
    bound grows with the squared distance of dist_k from uniform and
    shrinks with the reference's own distance from uniform and with the
    measured spread of the off-label softmax averages.
    """
    du = np.asarray(dist_u, dtype=np.float64)
    dk = np.asarray(dist_k, dtype=np.float64)
    c = conf.e.size
    if du.shape != (c,) or dk.shape != (c,):
        raise ConfigError("distributions must match the number of classes")
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    uniform = np.full(c, 1.0 / c)
    scale = lr * epochs
    lead = 0.5 * (scale * conf.e.sum() / (c * temperature)) ** 2
    main = lead * float(np.sum((dk - uniform) ** 2))
    drift = (scale / temperature) * float(np.max(np.abs(du - uniform)))
    spread_coeff = scale * (scale + c * c * temperature * np.log(c)) / (c * c * temperature**2)
    return main - drift - spread_coeff * conf.delta_spread


def gradient_gap_points(
    clients: list[ClientDataset],
    pooled: ClientDataset,
    model: MlpModel,
    lr: float,
) -> list[tuple[float, float]]:
    """(label entropy, squared drift of the scaled local gradient) pairs.

    Drift compares each client's full-batch mean gradient against the
    pooled dataset's, both scaled by the learning rate, in squared L2
    over all model parameters.
    """
    _, pooled_grad = batch_gradient(model, pooled.features, pooled.labels)
    points = []
    for client in clients:
        if client.num_samples == 0:
            raise DomainError("gradient_gap_points needs non-empty clients")
        _, grad = batch_gradient(model, client.features, client.labels)
        ent = entropy_nats(client.class_counts() / client.num_samples)
        gap = float(np.sum((lr * (grad - pooled_grad)) ** 2))
        points.append((ent, gap))
    return points


@dataclass(frozen=True)
class EnvelopeParams:
    """Exponential upper envelope y <= kappa - rho * exp(beta * (x - ln C))."""

    beta: float
    rho: float
    kappa: float

    def validate(self) -> None:
        if not (self.beta > 0):
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if not (self.kappa > self.rho > 0):
            raise ConfigError(
                f"need kappa > rho > 0, got kappa={self.kappa}, rho={self.rho}"
            )


def envelope_value(x: np.ndarray, params: EnvelopeParams, num_classes: int) -> np.ndarray:
    """Envelope height at entropy x."""
    params.validate()
    x = np.asarray(x, dtype=np.float64)
    return params.kappa - params.rho * np.exp(params.beta * (x - np.log(num_classes)))


def envelope_coverage(
    points: list[tuple[float, float]], params: EnvelopeParams, num_classes: int
) -> float:
    """Fraction of scatter points lying on or under the envelope."""
    if not points:
        raise DomainError("envelope_coverage needs at least one point")
    arr = np.asarray(points, dtype=np.float64)
    return float(np.mean(arr[:, 1] <= envelope_value(arr[:, 0], params, num_classes)))


def fit_envelope(
    points: list[tuple[float, float]],
    num_classes: int,
    coverage_target: float = 0.9,
) -> EnvelopeParams:
    """Grid-fit the tightest exponential envelope covering the target share.

    For each candidate (beta, rho) the smallest kappa reaching the
    coverage target is a quantile of y + rho * exp(beta * (x - ln C));
    among valid candidates (kappa > rho > 0) the fit minimizes the mean
    slack between envelope and points. Deterministic: grid order breaks
    ties.
    """
    if not points:
        raise DomainError("fit_envelope needs at least one point")
    if not 0 < coverage_target <= 1:
        raise ConfigError(f"coverage_target must be in (0, 1], got {coverage_target}")
    arr = np.asarray(points, dtype=np.float64)
    x, y = arr[:, 0], arr[:, 1]
    n = x.size
    rank = int(np.ceil(coverage_target * n)) - 1
    y_hi = float(y.max())
    if y_hi <= 0:
        y_hi = 1.0
    betas = np.linspace(0.25, 4.0, 16)
    rhos = y_hi * np.linspace(0.05, 2.0, 40)
    best = None
    best_slack = np.inf
    log_c = np.log(num_classes)
    for beta in betas:
        shape = np.exp(beta * (x - log_c))
        for rho in rhos:
            z = np.sort(y + rho * shape)
            kappa = float(z[rank])
            if not kappa > rho:
                continue
            slack = float(np.mean(np.clip(kappa - rho * shape - y, 0.0, None)))
            if slack < best_slack:
                best_slack = slack
                best = EnvelopeParams(beta=float(beta), rho=float(rho), kappa=kappa)
    if best is None:
        raise DomainError("no envelope candidate satisfied kappa > rho > 0")
    return best
