"""Matplotlib renderings written next to the delimited outputs.

Every report-style CLI path saves a figure alongside its CSV/JSON using
the Agg backend, so runs work headless. Figures are a convenience view;
the delimited files remain the interface of record.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import Partition
from .estimator import EnvelopeParams, envelope_value


def save_partition_heatmap(partition: Partition, path) -> None:
    """Class-by-client sample counts as a heatmap."""
    counts = np.stack([c.class_counts() for c in partition.clients])
    fig, ax = plt.subplots(figsize=(8, 4.5))
    im = ax.imshow(counts.T, aspect="auto", interpolation="nearest", cmap="viridis")
    ax.set_xlabel("client id")
    ax.set_ylabel("class")
    ax.set_title("samples per class per client")
    fig.colorbar(im, ax=ax, label="count")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_entropy_scatter(rows, path) -> None:
    """Estimated vs true label entropy at the last probed round."""
    last = max(r.round for r in rows)
    pts = [(r.true_entropy, r.estimated_entropy) for r in rows if r.round == last]
    arr = np.asarray(pts)
    fig, ax = plt.subplots(figsize=(5.5, 5))
    ax.scatter(arr[:, 0], arr[:, 1], s=18, alpha=0.8)
    ax.set_xlabel("true label entropy (nats)")
    ax.set_ylabel("estimated entropy (nats)")
    ax.set_title(f"entropy estimate vs truth, round {last}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_drift_envelope(
    points, params: EnvelopeParams, num_classes: int, path
) -> None:
    """Gradient-drift scatter with the fitted exponential envelope."""
    arr = np.asarray([(p[0], p[1]) for p in points], dtype=np.float64)
    xs = np.linspace(0.0, np.log(num_classes), 200)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.scatter(arr[:, 0], arr[:, 1], s=14, alpha=0.6, label="clients")
    ax.plot(
        xs,
        envelope_value(xs, params, num_classes),
        color="crimson",
        label=(
            f"envelope (beta={params.beta:.2f}, rho={params.rho:.3g}, "
            f"kappa={params.kappa:.3g})"
        ),
    )
    ax.set_xlabel("label entropy (nats)")
    ax.set_ylabel("squared gradient drift")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_accuracy_curves(summary: dict, path) -> None:
    """Raw and smoothed mean accuracy per selector, with the target line."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for sel, curve in summary["curves"].items():
        rounds = curve["rounds"]
        ax.plot(rounds, curve["mean_accuracy"], alpha=0.3)
        ax.plot(rounds, curve["smoothed_accuracy"], label=sel)
    ax.axhline(summary["target_accuracy"], color="gray", linestyle="--", label="target")
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
