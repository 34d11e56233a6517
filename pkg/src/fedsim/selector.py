"""Client selection strategies.

The entropy-guided strategy ("hics") samples a cluster from a softmax
over annealed mean cluster entropies, then a client within the cluster
proportionally to data size, repeating until the requested number of
distinct clients is reached. Baselines: uniform-free "random" (data-size
weighted, without replacement), "pow_d" (probe candidate losses, keep
the largest), "clustered_sampling" (cluster cached full update vectors
by angle, one client per cluster), and "div_fl" (greedy coverage over
update vectors, a facility-location style rule).

Each strategy's per-round cost is tracked as the total dimensionality of
client-held vectors it consumes: the entropy-guided path reads one
num_classes-sized bias displacement per client, while the baselines read
full model-sized vectors (pow_d's probe evaluates the whole model on
every candidate). Those counters land in the run manifest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cluster import ClusterAssignment
from .errors import ConfigError, DomainError, InvariantError

SELECTOR_KINDS = ("hics", "random", "pow_d", "clustered_sampling", "div_fl")

# safety valve for the rejection loop: after this many draws per requested
# slot the remaining picks fall back to the highest-marginal clients
DRAW_CAP_FACTOR = 10


def annealing_coefficient(round_idx: int, total_rounds: int, gamma0: float) -> float:
    """Linearly decaying exploration weight: gamma0 * (1 - t / T)."""
    if total_rounds < 1:
        raise ConfigError(f"total_rounds must be >= 1, got {total_rounds}")
    if round_idx < 0:
        raise ConfigError(f"round_idx must be >= 0, got {round_idx}")
    return gamma0 * (1.0 - round_idx / total_rounds)


@dataclass
class SelectionPolicy:
    """Two-stage sampling distribution over clusters then members."""

    cluster_probs: np.ndarray
    member_ids: list[np.ndarray]
    member_probs: list[np.ndarray]
    gamma: float
    num_clients: int

    def first_draw_marginal(self) -> np.ndarray:
        """Probability each client is produced by a single two-stage draw."""
        omega = np.zeros(self.num_clients)
        for pi_m, ids, probs in zip(self.cluster_probs, self.member_ids, self.member_probs):
            omega[ids] += pi_m * probs
        return omega


def build_policy(
    assignment: ClusterAssignment,
    gamma: float,
    sample_weights: np.ndarray,
    num_clients: int,
) -> SelectionPolicy:
    """Softmax cluster distribution and size-proportional member draws.

    Cluster m gets probability proportional to exp(gamma * mean entropy);
    inside a cluster, clients are drawn proportionally to sample_weights.
    """
    weights = np.asarray(sample_weights, dtype=np.float64)
    if weights.shape != (num_clients,):
        raise ConfigError(f"sample_weights shape {weights.shape} != ({num_clients},)")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise DomainError("sample_weights must be non-negative with positive sum")
    scores = gamma * assignment.mean_entropy
    scores = scores - scores.max()
    exp_scores = np.exp(scores)
    cluster_probs = exp_scores / exp_scores.sum()
    member_ids, member_probs = [], []
    for group in assignment.groups:
        ids = np.asarray(group, dtype=np.int64)
        w = weights[ids]
        total = w.sum()
        if total <= 0:
            # a cluster of zero-weight clients still needs a valid draw
            p = np.full(ids.size, 1.0 / ids.size)
        else:
            p = w / total
        member_ids.append(ids)
        member_probs.append(p)
    return SelectionPolicy(
        cluster_probs=cluster_probs,
        member_ids=member_ids,
        member_probs=member_probs,
        gamma=float(gamma),
        num_clients=num_clients,
    )


def draw_once(policy: SelectionPolicy, rng: np.random.Generator) -> int:
    """One two-stage draw: cluster by policy, member by within-cluster weight."""
    m = int(rng.choice(policy.cluster_probs.size, p=policy.cluster_probs))
    ids = policy.member_ids[m]
    return int(rng.choice(ids, p=policy.member_probs[m]))


def select_entropy_guided(
    policy: SelectionPolicy, num_select: int, rng: np.random.Generator
) -> list[int]:
    """Repeat two-stage draws until num_select distinct clients are chosen.

    Draws that repeat an already chosen client are discarded. If the draw
    budget (DRAW_CAP_FACTOR * num_select * num_clusters) runs out, the
    remaining slots are filled with the unchosen clients of largest
    first-draw marginal, ties to the lowest id.
    """
    if num_select < 1 or num_select > policy.num_clients:
        raise ConfigError(
            f"num_select must be in [1, {policy.num_clients}], got {num_select}"
        )
    chosen: list[int] = []
    seen = set()
    cap = DRAW_CAP_FACTOR * num_select * policy.cluster_probs.size
    draws = 0
    while len(chosen) < num_select and draws < cap:
        k = draw_once(policy, rng)
        draws += 1
        if k not in seen:
            seen.add(k)
            chosen.append(k)
    if len(chosen) < num_select:
        omega = policy.first_draw_marginal()
        order = np.lexsort((np.arange(policy.num_clients), -omega))
        for k in order:
            if int(k) not in seen:
                chosen.append(int(k))
                seen.add(int(k))
                if len(chosen) == num_select:
                    break
    return chosen


def warmup_select(
    pool: set[int] | list[int], num_select: int, rng: np.random.Generator
) -> list[int]:
    """Uniform draw without replacement from the not-yet-seen pool.

    Returns min(num_select, len(pool)) ids; the caller removes them from
    the pool so every client participates once across the warm-up rounds.
    """
    ordered = sorted(int(k) for k in pool)
    if not ordered:
        raise DomainError("warmup_select called with an empty pool")
    take = min(num_select, len(ordered))
    picks = rng.choice(len(ordered), size=take, replace=False)
    return [ordered[i] for i in picks]


def select_weighted_random(
    sample_weights: np.ndarray, num_select: int, rng: np.random.Generator
) -> list[int]:
    """Data-size weighted sampling without replacement."""
    weights = np.asarray(sample_weights, dtype=np.float64)
    n = weights.size
    if not 1 <= num_select <= n:
        raise ConfigError(f"num_select must be in [1, {n}], got {num_select}")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise DomainError("sample_weights must be non-negative with positive sum")
    picks = rng.choice(n, size=num_select, replace=False, p=weights / weights.sum())
    return [int(k) for k in picks]


def select_top_loss(
    losses: np.ndarray, num_select: int, candidates: np.ndarray | None = None
) -> list[int]:
    """Keep the num_select candidates with the largest probe loss.

    Ties break toward the lower client id. candidates defaults to every
    client (the idealized variant where all clients are probed).
    """
    losses = np.asarray(losses, dtype=np.float64)
    if candidates is None:
        candidates = np.arange(losses.size)
    cand = np.asarray(candidates, dtype=np.int64)
    if num_select > cand.size:
        raise ConfigError(f"cannot pick {num_select} from {cand.size} candidates")
    order = np.lexsort((cand, -losses[cand]))
    return [int(cand[i]) for i in order[:num_select]]


def select_one_per_cluster(
    assignment: ClusterAssignment,
    sample_weights: np.ndarray,
    rng: np.random.Generator,
) -> list[int]:
    """One client per cluster, drawn proportionally to data size."""
    weights = np.asarray(sample_weights, dtype=np.float64)
    chosen = []
    for group in assignment.groups:
        ids = np.asarray(group, dtype=np.int64)
        w = weights[ids]
        p = w / w.sum() if w.sum() > 0 else np.full(ids.size, 1.0 / ids.size)
        chosen.append(int(rng.choice(ids, p=p)))
    return chosen


def select_coverage_greedy(vectors: np.ndarray, num_select: int) -> list[int]:
    """Greedy coverage: repeatedly add the vector minimizing total distance.

    Each step adds the client whose update vector most reduces the sum
    over clients of the distance to their nearest already-selected
    vector. Deterministic; ties break toward the lower id. Of two clients
    with identical vectors at most one is picked before every distinct
    vector is covered, since the twin's marginal gain is zero.
    """
    vecs = np.asarray(vectors, dtype=np.float64)
    n = vecs.shape[0]
    if not 1 <= num_select <= n:
        raise ConfigError(f"num_select must be in [1, {n}], got {num_select}")
    # subtract-then-norm per row: exact symmetry and no cancellation for
    # near-identical update vectors
    dist = np.empty((n, n))
    for i in range(n):
        dist[i] = np.linalg.norm(vecs - vecs[i], axis=1)
    chosen: list[int] = []
    nearest = np.full(n, np.inf)
    for _ in range(num_select):
        totals = np.minimum(nearest[:, None], dist).sum(axis=0)
        totals[chosen] = np.inf
        j = int(np.argmin(totals))
        chosen.append(j)
        nearest = np.minimum(nearest, dist[:, j])
    return chosen


@dataclass
class CostCounter:
    """Dimensionality ledger for the vectors a selector consumes."""

    vectors_touched: int = 0
    total_dims: int = 0
    max_dim: int = 0
    selection_rounds: int = 0

    def record(self, dim: int, count: int = 1) -> None:
        self.vectors_touched += count
        self.total_dims += dim * count
        self.max_dim = max(self.max_dim, dim)

    def as_dict(self) -> dict:
        return {
            "vectors_touched": self.vectors_touched,
            "total_dims": self.total_dims,
            "max_dim": self.max_dim,
            "selection_rounds": self.selection_rounds,
        }


def check_selection(selected: list[int], num_clients: int, expected: int) -> list[int]:
    """Contract check every strategy's output passes through.

    Selections must be distinct, in range, and of the expected size;
    anything else is an internal invariant violation and aborts the run.
    """
    if len(selected) != expected or len(set(selected)) != expected:
        raise InvariantError(
            f"selector returned {len(selected)} ids ({len(set(selected))} distinct), "
            f"expected {expected}"
        )
    if any(not 0 <= k < num_clients for k in selected):
        raise InvariantError(f"selector returned out-of-range ids: {selected}")
    return selected
