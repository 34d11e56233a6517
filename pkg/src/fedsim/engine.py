"""Deterministic single-process federated training loop.

One Simulation owns the global model, the per-client bias-displacement
cache, and the selection strategy. Rounds follow the usual pattern:
select clients, run their local updates from the current global model,
aggregate by unweighted mean of the returned models, then refresh the
caches for exactly the clients that participated. The first
ceil(N / K) rounds are a warm-up that cycles every client once
(uniformly, without replacement) so each cache entry holds a real
displacement before any update-driven selection happens.

Determinism: every random draw comes from a stream derived by hashing
(run seed, purpose tag, round, client id), local updates are pure given
their seed, and aggregation reduces in ascending client id order, so the
metrics CSV is byte-identical for a given seed regardless of the
FEDSIM_THREADS worker count.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
import platform
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import savgol_filter

from ._version import __version__
from .cluster import ClusterAssignment, ClusterConfig, cluster_clients
from .data import ClientDataset, Partition, entropy_nats, label_distribution
from .errors import ConfigError, DomainError, InvariantError
from .estimator import BiasUpdateRecord, EstimatorConfig, estimate_entropy
from .nn import (
    MlpModel,
    TrainConfig,
    batch_gradient,
    forward,
    local_update,
    softmax,
)
from .selector import (
    SELECTOR_KINDS,
    CostCounter,
    annealing_coefficient,
    build_policy,
    check_selection,
    select_coverage_greedy,
    select_entropy_guided,
    select_one_per_cluster,
    select_top_loss,
    select_weighted_random,
    warmup_select,
)

# purpose tags for deriving independent random streams from the run seed
TAG_DATASET = 0
TAG_PARTITION = 1
TAG_MODEL_INIT = 2
TAG_SELECTOR = 3
TAG_LOCAL = 4

METRICS_COLUMNS = (
    "round",
    "selector",
    "selected_ids",
    "avg_train_loss",
    "std_train_loss",
    "test_accuracy",
    "h_m_diag",
    "gamma_t",
)

# above this parameter count the update-clustering baseline falls back to
# caching only the output-bias slice, and the manifest records that
CS_FULL_VECTOR_LIMIT = 100_000


def substream(run_seed: int, *tags: int) -> np.random.SeedSequence:
    """Independent, reproducible seed stream for one purpose."""
    return np.random.SeedSequence(entropy=(int(run_seed), *[int(t) for t in tags]))


def substream_int(run_seed: int, *tags: int) -> int:
    return int(substream(run_seed, *tags).generate_state(1)[0])


def worker_count() -> int:
    """Parallelism cap from FEDSIM_THREADS (default 1, minimum 1)."""
    raw = os.environ.get("FEDSIM_THREADS", "1").strip() or "1"
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"FEDSIM_THREADS must be an integer, got {raw!r}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a Simulation needs besides the data and the seed."""

    num_clients: int
    clients_per_round: int
    total_rounds: int
    selector_kind: str = "hics"
    gamma0: float = 4.0
    powd_num_candidates: int | None = None
    hidden_widths: tuple[int, ...] = (64,)
    train: TrainConfig = field(default_factory=TrainConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    cluster_mix_weight: float = 0.1
    num_clusters: int | None = None
    eval_every: int = 5
    hm_beta: float = 1.0
    lr_decay_every: int | None = None
    lr_decay_factor: float = 0.5

    @property
    def warmup_rounds(self) -> int:
        return math.ceil(self.num_clients / self.clients_per_round)

    @property
    def resolved_num_clusters(self) -> int:
        return self.num_clusters if self.num_clusters is not None else self.clients_per_round

    def validate(self) -> None:
        if self.num_clients < 1:
            raise ConfigError(f"num_clients must be >= 1, got {self.num_clients}")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ConfigError(
                f"clients_per_round must be in [1, {self.num_clients}], "
                f"got {self.clients_per_round}"
            )
        if self.total_rounds < self.warmup_rounds:
            raise ConfigError(
                f"total_rounds {self.total_rounds} < warm-up length {self.warmup_rounds}"
            )
        if self.selector_kind not in SELECTOR_KINDS:
            raise ConfigError(
                f"unknown selector {self.selector_kind!r}, expected one of {SELECTOR_KINDS}"
            )
        if not 1 <= self.resolved_num_clusters <= self.num_clients:
            raise ConfigError(
                f"num_clusters must be in [1, {self.num_clients}], "
                f"got {self.resolved_num_clusters}"
            )
        if self.powd_num_candidates is not None and not (
            self.clients_per_round <= self.powd_num_candidates <= self.num_clients
        ):
            raise ConfigError(
                "powd_num_candidates must lie between clients_per_round and num_clients"
            )
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if not 0.0 <= self.cluster_mix_weight <= 1.0:
            raise ConfigError(
                f"cluster mix_weight must be in [0, 1], got {self.cluster_mix_weight}"
            )
        if self.lr_decay_every is not None and self.lr_decay_every < 1:
            raise ConfigError(f"lr_decay_every must be >= 1, got {self.lr_decay_every}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError(
                f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}"
            )
        if any(int(w) < 1 for w in self.hidden_widths):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden_widths}")
        self.train.validate()
        self.estimator.validate()


@dataclass
class RoundMetrics:
    """One row of the per-round metrics table."""

    round: int
    selector: str
    selected: list[int]
    avg_train_loss: float
    std_train_loss: float
    test_accuracy: float | None
    h_m_diag: float
    gamma: float
    wall_time: float


def evaluate(model: MlpModel, dataset: ClientDataset) -> tuple[float, float]:
    """Accuracy (argmax of logits, ties to the lowest class) and mean loss."""
    if dataset.num_samples == 0:
        raise DomainError("evaluate needs a non-empty dataset")
    logits = forward(model, dataset.features)
    preds = np.argmax(logits, axis=1)
    probs = softmax(logits)
    picked = np.clip(probs[np.arange(dataset.num_samples), dataset.labels], 1e-12, None)
    return float(np.mean(preds == dataset.labels)), float(np.mean(-np.log(picked)))


def system_heterogeneity(
    distributions: np.ndarray, weights: np.ndarray, beta: float = 1.0
) -> float:
    """Weighted exponential-entropy index of a client population.

    sum_k w_k * exp(beta * H(D_k)) / exp(beta * ln C); equals 1 when every
    client is label-uniform and C ** -beta when every client is one-hot.
    """
    dists = np.asarray(distributions, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if dists.ndim != 2 or dists.shape[0] != w.size:
        raise ConfigError("distributions must be (num_clients, num_classes)")
    if beta <= 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    ents = np.array([entropy_nats(row) for row in dists])
    c = dists.shape[1]
    return float(np.sum(w * np.exp(beta * ents)) / np.exp(beta * np.log(c)))


def savitzky_golay(series: np.ndarray, window: int = 13, polyorder: int = 3) -> np.ndarray:
    """Least-squares local polynomial smoothing of a 1-d series.

    Series shorter than the window are returned unsmoothed with a
    UserWarning. Polynomials up to the given order are reproduced
    exactly. Smoothing is applied only when summarizing or plotting;
    stored metrics stay raw.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ConfigError(f"series must be 1-d, got shape {x.shape}")
    if window < 3 or window % 2 == 0:
        raise ConfigError(f"window must be odd and >= 3, got {window}")
    if polyorder < 0 or polyorder >= window:
        raise ConfigError(f"polyorder must be in [0, window), got {polyorder}")
    if x.size < window:
        warnings.warn(
            f"series of length {x.size} shorter than window {window}; returned unsmoothed",
            UserWarning,
            stacklevel=2,
        )
        return x.copy()
    return savgol_filter(x, window_length=window, polyorder=polyorder, mode="interp")


class Simulation:
    """Stateful federated run for one (config, partition, seed) triple."""

    def __init__(
        self,
        partition: Partition,
        test_set: ClientDataset | None,
        cfg: ExperimentConfig,
        run_seed: int,
    ):
        cfg.validate()
        if partition.num_clients != cfg.num_clients:
            raise ConfigError(
                f"config expects {cfg.num_clients} clients, partition has "
                f"{partition.num_clients}"
            )
        for k, client in enumerate(partition.clients):
            if client.num_samples == 0:
                raise DomainError(f"client {k} has no samples")
        self.cfg = cfg
        self.partition = partition
        self.test_set = test_set
        self.run_seed = int(run_seed)

        first = partition.clients[0]
        self.num_classes = first.num_classes
        layer_sizes = (first.features.shape[1], *cfg.hidden_widths, self.num_classes)
        self.model = MlpModel.init(layer_sizes, substream(run_seed, TAG_MODEL_INIT))
        self.weights = partition.sample_fractions()
        self.selector_rng = np.random.default_rng(substream(run_seed, TAG_SELECTOR))
        self.bias_records = [
            BiasUpdateRecord(k, np.zeros(self.num_classes), 0)
            for k in range(cfg.num_clients)
        ]
        self.cs_bias_only = self.model.num_params > CS_FULL_VECTOR_LIMIT
        cs_dim = self.num_classes if self.cs_bias_only else self.model.num_params
        self.update_cache = np.zeros((cfg.num_clients, cs_dim))
        self.warmup_pool: set[int] = set(range(cfg.num_clients))
        self.counter = CostCounter()
        dists = np.stack(
            [label_distribution(c).probs for c in partition.clients]
        )
        self.true_distributions = dists
        self.h_m_diag = system_heterogeneity(dists, self.weights, cfg.hm_beta)

    def learning_rate(self, round_idx: int) -> float:
        lr = self.cfg.train.learning_rate
        if self.cfg.lr_decay_every is not None:
            lr *= self.cfg.lr_decay_factor ** ((round_idx - 1) // self.cfg.lr_decay_every)
        return lr

    def _client_loss(self, client: ClientDataset) -> float:
        logits = forward(self.model, client.features)
        probs = softmax(logits)
        picked = np.clip(
            probs[np.arange(client.num_samples), client.labels], 1e-12, None
        )
        return float(np.mean(-np.log(picked)))

    def estimated_entropies(self) -> np.ndarray:
        return np.array(
            [
                estimate_entropy(rec.delta_bias, self.cfg.estimator)
                for rec in self.bias_records
            ]
        )

    def _select(self, round_idx: int) -> list[int]:
        cfg = self.cfg
        n, k = cfg.num_clients, cfg.clients_per_round
        if round_idx <= cfg.warmup_rounds:
            expected = min(k, len(self.warmup_pool))
            picks = warmup_select(self.warmup_pool, k, self.selector_rng)
            self.warmup_pool.difference_update(picks)
            return sorted(check_selection(picks, n, expected))

        self.counter.selection_rounds += 1
        kind = cfg.selector_kind
        if kind == "random":
            picks = select_weighted_random(self.weights, k, self.selector_rng)
        elif kind == "hics":
            self.counter.record(self.num_classes, n)
            ents = self.estimated_entropies()
            deltas = np.stack([rec.delta_bias for rec in self.bias_records])
            assignment = cluster_clients(
                deltas,
                ents,
                ClusterConfig(cfg.resolved_num_clusters, cfg.cluster_mix_weight),
            )
            gamma = annealing_coefficient(round_idx, cfg.total_rounds, cfg.gamma0)
            policy = build_policy(assignment, gamma, self.weights, n)
            picks = select_entropy_guided(policy, k, self.selector_rng)
        elif kind == "pow_d":
            d = cfg.powd_num_candidates
            if d is None or d >= n:
                candidates = np.arange(n)
            else:
                candidates = self.selector_rng.choice(n, size=d, replace=False)
            losses = np.zeros(n)
            for c in candidates:
                losses[c] = self._client_loss(self.partition.clients[int(c)])
            self.counter.record(self.model.num_params, candidates.size)
            picks = select_top_loss(losses, k, candidates)
        elif kind == "clustered_sampling":
            self.counter.record(self.update_cache.shape[1], n)
            assignment = cluster_clients(
                self.update_cache,
                np.zeros(n),
                ClusterConfig(num_clusters=k, mix_weight=1.0),
            )
            picks = select_one_per_cluster(assignment, self.weights, self.selector_rng)
        elif kind == "div_fl":
            vectors = np.stack(
                [
                    batch_gradient(self.model, c.features, c.labels)[1]
                    for c in self.partition.clients
                ]
            )
            self.counter.record(self.model.num_params, n)
            picks = select_coverage_greedy(vectors, k)
        else:  # pragma: no cover - guarded by validate()
            raise ConfigError(f"unknown selector {kind!r}")
        return sorted(check_selection(picks, n, k))

    def _run_local(
        self, selected: list[int], train_cfg: TrainConfig, round_idx: int
    ) -> dict[int, "object"]:
        def one(k: int):
            seed = substream(self.run_seed, TAG_LOCAL, round_idx, k)
            return k, local_update(
                self.model, self.partition.clients[k], train_cfg, seed
            )

        workers = worker_count()
        if workers == 1 or len(selected) == 1:
            results = dict(one(k) for k in selected)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = dict(pool.map(one, selected))
        return results

    def run_round(self, round_idx: int) -> RoundMetrics:
        """Advance the simulation by one round and return its metrics."""
        cfg = self.cfg
        if not 1 <= round_idx <= cfg.total_rounds:
            raise ConfigError(f"round_idx must be in [1, {cfg.total_rounds}]")
        started = time.perf_counter()
        train_cfg = dataclasses.replace(
            cfg.train, learning_rate=self.learning_rate(round_idx)
        )
        selected = self._select(round_idx)
        updates = self._run_local(selected, train_cfg, round_idx)

        # aggregate in ascending client id order for bitwise reproducibility
        total = np.zeros_like(self.model.theta)
        for k in selected:
            total += updates[k].delta
        self.model.theta += total / len(selected)

        for k in selected:
            upd = updates[k]
            self.bias_records[k] = BiasUpdateRecord(k, upd.delta_bias.copy(), round_idx)
            self.update_cache[k] = (
                upd.delta_bias if self.cs_bias_only else upd.delta
            )

        if round_idx == cfg.warmup_rounds:
            stale = [r.client_id for r in self.bias_records if r.last_updated_round < 1]
            if stale:
                raise InvariantError(
                    f"warm-up ended with untouched clients: {stale}"
                )

        losses = np.array([updates[k].train_loss for k in selected])
        accuracy = None
        if self.test_set is not None and (
            round_idx % cfg.eval_every == 0 or round_idx == cfg.total_rounds
        ):
            accuracy, _ = evaluate(self.model, self.test_set)
        return RoundMetrics(
            round=round_idx,
            selector=cfg.selector_kind,
            selected=selected,
            avg_train_loss=float(losses.mean()),
            std_train_loss=float(losses.std()),
            test_accuracy=accuracy,
            h_m_diag=self.h_m_diag,
            gamma=annealing_coefficient(round_idx, cfg.total_rounds, cfg.gamma0),
            wall_time=time.perf_counter() - started,
        )

    def run(self) -> list[RoundMetrics]:
        return [self.run_round(t) for t in range(1, self.cfg.total_rounds + 1)]


def run_experiment(
    partition: Partition,
    test_set: ClientDataset | None,
    cfg: ExperimentConfig,
    run_seed: int,
) -> tuple[list[RoundMetrics], Simulation]:
    """Convenience wrapper: build a Simulation, run every round."""
    sim = Simulation(partition, test_set, cfg, run_seed)
    return sim.run(), sim


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def write_metrics_csv(rows: list[RoundMetrics], path) -> None:
    """Serialize round metrics with a stable, platform-independent format."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    r.round,
                    r.selector,
                    ";".join(str(k) for k in r.selected),
                    _fmt(r.avg_train_loss),
                    _fmt(r.std_train_loss),
                    "" if r.test_accuracy is None else _fmt(r.test_accuracy),
                    _fmt(r.h_m_diag),
                    _fmt(r.gamma),
                ]
            )


def build_manifest(config_echo: dict, run_seed: int, sim: Simulation) -> dict:
    """Reproducibility record written next to each metrics CSV.

    The "config" entry is a complete, normalized configuration: feeding
    the manifest file back as --config reproduces the identical run.
    """
    return {
        "config": config_echo,
        "seed": int(run_seed),
        "selector": sim.cfg.selector_kind,
        "selector_cost": sim.counter.as_dict(),
        "cs_bias_only": bool(sim.cs_bias_only),
        "model_layer_sizes": list(sim.model.layer_sizes),
        "model_num_params": int(sim.model.num_params),
        "h_m_diag": sim.h_m_diag,
        "metrics_columns": list(METRICS_COLUMNS),
        "environment": {
            "os": platform.platform(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "package_version": __version__,
        },
    }
