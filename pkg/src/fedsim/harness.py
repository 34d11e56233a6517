"""Validation harnesses that pair simulator runs with ground truth.

These drive the same building blocks as a normal run but additionally
observe quantities the server is never allowed to use for selection:
true label distributions and full client gradients. The entropy probe
tracks how well the bias-displacement entropy estimate ranks clients by
their true label entropy round over round; the drift probe trains with
full participation and records (label entropy, gradient drift) scatter
points used to fit the exponential envelope diagnostic.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .data import ClientDataset, Partition, label_distribution
from .engine import (
    TAG_LOCAL,
    TAG_MODEL_INIT,
    ExperimentConfig,
    Simulation,
    substream,
)
from .errors import ConfigError
from .estimator import estimate_entropy, gradient_gap_points
from .nn import MlpModel, local_update


@dataclass
class EntropyProbeRow:
    client_id: int
    true_entropy: float
    estimated_entropy: float
    round: int


def entropy_probe(
    partition: Partition,
    test_set: ClientDataset | None,
    cfg: ExperimentConfig,
    run_seed: int,
) -> list[EntropyProbeRow]:
    """Run a simulation, recording cached entropy estimates per round.

    Rows appear for a client only once its cache entry holds a real
    displacement, so the first complete snapshot is at the end of the
    warm-up. True entropies come from the actual label distributions.
    """
    sim = Simulation(partition, test_set, cfg, run_seed)
    true_h = [label_distribution(c).entropy() for c in partition.clients]
    rows: list[EntropyProbeRow] = []
    for t in range(1, cfg.total_rounds + 1):
        sim.run_round(t)
        for k, rec in enumerate(sim.bias_records):
            if rec.last_updated_round >= 1:
                rows.append(
                    EntropyProbeRow(
                        client_id=k,
                        true_entropy=true_h[k],
                        estimated_entropy=estimate_entropy(
                            rec.delta_bias, cfg.estimator
                        ),
                        round=t,
                    )
                )
    return rows


@dataclass
class DriftProbeRow:
    round: int
    client_id: int  # -1 marks the pooled super-client reference point
    label_entropy: float
    gradient_gap: float


def drift_probe(
    partition: Partition,
    pooled: ClientDataset,
    cfg: ExperimentConfig,
    run_seed: int,
    probe_every: int = 5,
) -> list[DriftProbeRow]:
    """Full-participation training with periodic gradient-drift probes.

    At the start of rounds 1, 1 + probe_every, ... every client's
    full-batch gradient is compared against the pooled dataset's, scaled
    by the current learning rate; the pooled reference itself contributes
    a point at (pooled label entropy, 0). Between probes all clients
    train locally and the model aggregates by unweighted mean.
    """
    if probe_every < 1:
        raise ConfigError(f"probe_every must be >= 1, got {probe_every}")
    cfg.validate()
    first = partition.clients[0]
    layer_sizes = (
        first.features.shape[1],
        *cfg.hidden_widths,
        first.num_classes,
    )
    model = MlpModel.init(layer_sizes, substream(run_seed, TAG_MODEL_INIT))
    pooled_entropy = label_distribution(pooled).entropy()
    rows: list[DriftProbeRow] = []
    for t in range(1, cfg.total_rounds + 1):
        lr = cfg.train.learning_rate
        if cfg.lr_decay_every is not None:
            lr *= cfg.lr_decay_factor ** ((t - 1) // cfg.lr_decay_every)
        if (t - 1) % probe_every == 0:
            points = gradient_gap_points(partition.clients, pooled, model, lr)
            for k, (ent, gap) in enumerate(points):
                rows.append(DriftProbeRow(t, k, ent, gap))
            rows.append(DriftProbeRow(t, -1, pooled_entropy, 0.0))
        train_cfg = dataclasses.replace(cfg.train, learning_rate=lr)
        total = None
        for k, client in enumerate(partition.clients):
            upd = local_update(
                model, client, train_cfg, substream(run_seed, TAG_LOCAL, t, k)
            )
            total = upd.delta if total is None else total + upd.delta
        model.theta += total / partition.num_clients
    return rows
