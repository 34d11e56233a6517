"""Shared fixtures and reference implementations used as test oracles."""

from __future__ import annotations

import numpy as np
import pytest

from fedsim import ClientDataset, MlpModel


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def random_dataset(
    rng: np.random.Generator, n: int, dim: int, num_classes: int
) -> ClientDataset:
    return ClientDataset(
        rng.normal(size=(n, dim)),
        rng.integers(0, num_classes, size=n),
        num_classes,
    )


def loopy_forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Straight-line scalar-loop forward pass, used as an oracle."""
    h = [float(v) for v in x]
    layers = model.layers()
    for li, (w, b) in enumerate(layers):
        out = []
        for j in range(w.shape[0]):
            acc = float(b[j])
            for i in range(w.shape[1]):
                acc += float(w[j, i]) * h[i]
            if li < len(layers) - 1:
                acc = max(acc, 0.0)
            out.append(acc)
        h = out
    return np.array(h)


def finite_difference_gradient(loss_fn, theta: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] += h
        up = loss_fn(bumped)
        bumped[i] -= 2 * h
        down = loss_fn(bumped)
        grad[i] = (up - down) / (2 * h)
    return grad


def write_linear_metrics(path, selector: str, accuracies) -> None:
    """Metrics CSV fixture: one evaluated accuracy per round."""
    from fedsim import RoundMetrics, write_metrics_csv

    rows = [
        RoundMetrics(
            round=t,
            selector=selector,
            selected=[0, 1],
            avg_train_loss=1.0 / t,
            std_train_loss=0.05,
            test_accuracy=float(a),
            h_m_diag=0.5,
            gamma=0.0,
            wall_time=0.0,
        )
        for t, a in enumerate(accuracies, start=1)
    ]
    write_metrics_csv(rows, path)
