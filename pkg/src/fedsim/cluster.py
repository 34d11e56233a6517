"""Grouping clients by the geometry of their bias displacements.

The dissimilarity between two clients blends the angle between their
output-bias displacement vectors with the absolute difference of their
estimated label entropies. Agglomerative merging with the Ward variance
update is applied directly to those dissimilarities (no Euclidean
embedding is assumed), with a deterministic tie-break so that runs are
reproducible: among equally close pairs the one whose smallest member
ids come first merges first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

HALF_PI = float(np.pi / 2.0)


@dataclass(frozen=True)
class ClusterConfig:
    """mix_weight blends angle (weight w) with entropy gap (weight 1-w)."""

    num_clusters: int
    mix_weight: float = 0.1

    def validate(self) -> None:
        if self.num_clusters < 1:
            raise ConfigError(f"num_clusters must be >= 1, got {self.num_clusters}")
        if not 0.0 <= self.mix_weight <= 1.0:
            raise ConfigError(f"mix_weight must be in [0, 1], got {self.mix_weight}")


def pair_distance(
    delta_u: np.ndarray,
    delta_k: np.ndarray,
    ent_u: float,
    ent_k: float,
    mix_weight: float,
) -> float:
    """Blended dissimilarity between two clients' bias displacements.

    mix_weight * angle(delta_u, delta_k) + (1 - mix_weight) * |ent_u - ent_k|.
    A zero-norm displacement is treated as orthogonal to any non-zero one
    (angle pi/2); two zero vectors have angle 0. Symmetric, non-negative,
    zero for identical inputs; the triangle inequality is not relied on.
    """
    u = np.asarray(delta_u, dtype=np.float64)
    k = np.asarray(delta_k, dtype=np.float64)
    if u.shape != k.shape:
        raise ConfigError(f"shape mismatch {u.shape} vs {k.shape}")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(k))):
        raise DomainError("non-finite bias displacement")
    nu = float(np.linalg.norm(u))
    nk = float(np.linalg.norm(k))
    if nu == 0.0 and nk == 0.0:
        angle = 0.0
    elif nu == 0.0 or nk == 0.0:
        angle = HALF_PI
    else:
        cosine = float(np.clip(np.dot(u, k) / (nu * nk), -1.0, 1.0))
        angle = float(np.arccos(cosine))
    return mix_weight * angle + (1.0 - mix_weight) * abs(float(ent_u) - float(ent_k))


def distance_matrix(
    deltas: np.ndarray, entropies: np.ndarray | None, mix_weight: float
) -> np.ndarray:
    """Symmetric zero-diagonal matrix of pairwise blended dissimilarities.

    entropies may be None only when mix_weight is 1 (pure-angle mode, the
    path the update-clustering baseline uses on full update vectors).
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    n = deltas.shape[0]
    if entropies is None:
        if mix_weight != 1.0:
            raise ConfigError("entropies required unless mix_weight == 1")
        entropies = np.zeros(n)
    ents = np.asarray(entropies, dtype=np.float64)
    if ents.shape != (n,):
        raise ConfigError(f"entropies shape {ents.shape} != ({n},)")
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = pair_distance(deltas[i], deltas[j], ents[i], ents[j], mix_weight)
            out[i, j] = d
            out[j, i] = d
    return out


def ward_cluster(
    dist: np.ndarray, num_clusters: int
) -> tuple[list[list[int]], list[tuple[int, int, int, float]]]:
    """Agglomerate with the Ward variance update down to num_clusters.

    Merge heights use the running Ward dissimilarities; each cluster is
    labeled by its smallest member id, and exact ties merge the pair with
    the lexicographically smallest label pair. Returns the final groups
    (each sorted, ordered by label) and the merge list as
    (step, label_a, label_b, height) tuples.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if dist.shape != (n, n):
        raise ConfigError(f"distance matrix must be square, got {dist.shape}")
    if n == 0:
        raise DomainError("cannot cluster zero clients")
    if not 1 <= num_clusters <= n:
        raise ConfigError(f"num_clusters must be in [1, {n}], got {num_clusters}")
    if np.any(dist < 0) or np.any(np.diag(dist) != 0):
        raise DomainError("distances must be non-negative with a zero diagonal")

    d2 = dist.astype(np.float64) ** 2
    labels = list(range(n))
    members = {i: [i] for i in range(n)}
    sizes = {i: 1 for i in range(n)}
    merges: list[tuple[int, int, int, float]] = []
    step = 1
    while len(labels) > num_clusters:
        best_pair = None
        best_val = np.inf
        for ai in range(len(labels)):
            for bi in range(ai + 1, len(labels)):
                la, lb = labels[ai], labels[bi]
                val = d2[la, lb]
                if val < best_val:
                    best_val = val
                    best_pair = (la, lb)
        la, lb = best_pair
        height = float(np.sqrt(max(best_val, 0.0)))
        sa, sb = sizes[la], sizes[lb]
        for lk in labels:
            if lk in (la, lb):
                continue
            sk = sizes[lk]
            merged = ((sa + sk) * d2[la, lk] + (sb + sk) * d2[lb, lk] - sk * best_val) / (
                sa + sb + sk
            )
            d2[la, lk] = merged
            d2[lk, la] = merged
        members[la] = sorted(members[la] + members[lb])
        sizes[la] = sa + sb
        del members[lb], sizes[lb]
        labels.remove(lb)
        merges.append((step, la, lb, height))
        step += 1
    groups = [sorted(members[l]) for l in sorted(labels)]
    return groups, merges


@dataclass
class ClusterAssignment:
    """Disjoint client groups with their mean estimated entropies."""

    groups: list[list[int]]
    mean_entropy: np.ndarray
    merges: list[tuple[int, int, int, float]]

    @property
    def num_clusters(self) -> int:
        return len(self.groups)

    def merges_json(self) -> list[dict]:
        return [
            {"step": s, "merged_a": a, "merged_b": b, "height": h}
            for s, a, b, h in self.merges
        ]


def annotate_means(groups: list[list[int]], entropies: np.ndarray) -> np.ndarray:
    """Mean estimated entropy per group, in group order."""
    ents = np.asarray(entropies, dtype=np.float64)
    out = np.empty(len(groups))
    for m, group in enumerate(groups):
        if not group:
            raise DomainError(f"group {m} is empty")
        out[m] = ents[list(group)].mean()
    return out


def cluster_clients(
    deltas: np.ndarray, entropies: np.ndarray, cfg: ClusterConfig
) -> ClusterAssignment:
    """Full pipeline: pairwise dissimilarities, Ward merge, group means."""
    cfg.validate()
    dist = distance_matrix(deltas, entropies, cfg.mix_weight)
    groups, merges = ward_cluster(dist, cfg.num_clusters)
    return ClusterAssignment(
        groups=groups,
        mean_entropy=annotate_means(groups, np.asarray(entropies, dtype=np.float64)),
        merges=merges,
    )
