"""Datasets and label-skewed partitioning.

Provides a Gaussian-blob classification task for desk-scale experiments,
a reader for the big-endian IDX image/label container, and a Dirichlet
partitioner that splits a pooled dataset across simulated clients with a
controllable degree of label imbalance per client cohort.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, IdxParseError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def entropy_nats(probs: np.ndarray) -> float:
    """Shannon entropy in nats with the 0*log(0) = 0 convention."""
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0.0]
    return float(-np.sum(nz * np.log(nz)))


@dataclass
class ClientDataset:
    """Feature rows with integer labels for one client (or a pooled set)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ConfigError(f"features must be 2-d, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ConfigError(
                f"{self.features.shape[0]} feature rows but labels shape {self.labels.shape}"
            )
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DomainError(
                f"labels outside [0, {self.num_classes}): "
                f"range [{self.labels.min()}, {self.labels.max()}]"
            )

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes).astype(np.int64)

    def subset(self, indices: np.ndarray) -> "ClientDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ClientDataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class LabelDistribution:
    """Per-class label proportions of one dataset."""

    probs: np.ndarray

    def entropy(self) -> float:
        return entropy_nats(self.probs)


def label_distribution(dataset: ClientDataset) -> LabelDistribution:
    """Empirical label distribution of a non-empty dataset."""
    if dataset.num_samples == 0:
        raise DomainError("label_distribution needs a non-empty dataset")
    counts = dataset.class_counts().astype(np.float64)
    return LabelDistribution(probs=counts / counts.sum())


def generate_blobs(
    num_classes: int,
    per_class_n: int,
    dim: int,
    spread: float,
    seed,
    test_fraction: float = 0.2,
) -> tuple[ClientDataset, ClientDataset]:
    """Isotropic Gaussian clusters with one cluster per class.

    Class means are distinct directions scaled to norm ``spread``; samples
    add unit-variance noise. Returns a pooled training set with exactly
    per_class_n samples per class plus a held-out balanced test set drawn
    from the same means with round(test_fraction * per_class_n) samples
    per class (at least one). Fully deterministic per seed.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if per_class_n < 1:
        raise ConfigError(f"per_class_n must be >= 1, got {per_class_n}")
    if dim < 1:
        raise ConfigError(f"dim must be >= 1, got {dim}")
    if spread <= 0:
        raise ConfigError(f"spread must be > 0, got {spread}")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(num_classes, dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DomainError("degenerate zero-norm class direction")
    means = directions / norms * spread

    test_per_class = max(1, int(round(test_fraction * per_class_n)))
    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(num_classes):
        train_x.append(means[c] + rng.normal(size=(per_class_n, dim)))
        train_y.append(np.full(per_class_n, c, dtype=np.int64))
        test_x.append(means[c] + rng.normal(size=(test_per_class, dim)))
        test_y.append(np.full(test_per_class, c, dtype=np.int64))
    train = ClientDataset(np.vstack(train_x), np.concatenate(train_y), num_classes)
    test = ClientDataset(np.vstack(test_x), np.concatenate(test_y), num_classes)
    return train, test


def _read_idx_header(raw: bytes, path: str, magic_expected: int, n_dims: int) -> tuple[int, ...]:
    header_bytes = 4 * (1 + n_dims)
    if len(raw) < header_bytes:
        raise IdxParseError(path, len(raw), f"truncated header, need {header_bytes} bytes")
    fields = struct.unpack(f">{1 + n_dims}I", raw[:header_bytes])
    if fields[0] != magic_expected:
        raise IdxParseError(
            path, 0, f"bad magic 0x{fields[0]:08x}, expected 0x{magic_expected:08x}"
        )
    return fields[1:]


def load_idx(images_path: str, labels_path: str, num_classes: int | None = None) -> ClientDataset:
    """Load an IDX image/label pair into a pooled dataset.

    Images are flattened to rows and scaled from [0, 255] into [0, 1].
    Malformed files raise IdxParseError naming the byte offset of the
    problem; an image/label count mismatch points at the label header's
    count field.
    """
    with open(images_path, "rb") as fh:
        img_raw = fh.read()
    with open(labels_path, "rb") as fh:
        lbl_raw = fh.read()

    n_img, rows, cols = _read_idx_header(img_raw, images_path, IDX_IMAGE_MAGIC, 3)
    expected = 16 + n_img * rows * cols
    if len(img_raw) != expected:
        raise IdxParseError(
            images_path,
            min(len(img_raw), expected),
            f"pixel payload has {len(img_raw) - 16} bytes, expected {n_img * rows * cols}",
        )
    (n_lbl,) = _read_idx_header(lbl_raw, labels_path, IDX_LABEL_MAGIC, 1)
    if len(lbl_raw) != 8 + n_lbl:
        raise IdxParseError(
            labels_path,
            min(len(lbl_raw), 8 + n_lbl),
            f"label payload has {len(lbl_raw) - 8} bytes, expected {n_lbl}",
        )
    if n_lbl != n_img:
        raise IdxParseError(labels_path, 4, f"label count {n_lbl} != image count {n_img}")
    if n_img == 0:
        raise DomainError(f"{images_path}: empty dataset")

    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16).astype(np.float64)
    features = pixels.reshape(n_img, rows * cols) / 255.0
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, offset=8).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    if labels.max() >= num_classes:
        raise DomainError(
            f"{labels_path}: label {labels.max()} outside [0, {num_classes})"
        )
    return ClientDataset(features, labels, int(num_classes))


@dataclass(frozen=True)
class PartitionSpec:
    """How to split one pooled dataset across clients.

    Clients are divided into len(alphas) equal cohorts; cohort j draws its
    per-class client shares from a symmetric Dirichlet with concentration
    alphas[j] over an equal slice of the pooled data. Small alpha gives
    near single-class clients, large alpha near uniform clients.
    """

    num_clients: int
    alphas: tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError(f"num_clients must be >= 1, got {self.num_clients}")
        if len(self.alphas) == 0:
            raise ConfigError("alphas must be non-empty")
        if any(a <= 0 for a in self.alphas):
            raise ConfigError(f"alphas must be > 0, got {self.alphas}")
        if self.num_clients % len(self.alphas) != 0:
            raise ConfigError(
                f"num_clients {self.num_clients} not divisible into "
                f"{len(self.alphas)} equal cohorts"
            )


@dataclass
class Partition:
    """Per-client datasets plus the cohort bookkeeping used to build them."""

    clients: list[ClientDataset]
    cohort_of_client: list[int]
    alphas: tuple[float, ...]
    client_indices: list[np.ndarray] = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def sample_fractions(self) -> np.ndarray:
        """Client weights proportional to local sample counts."""
        counts = np.array([c.num_samples for c in self.clients], dtype=np.float64)
        return counts / counts.sum()

    def to_json_records(self) -> list[dict]:
        return [
            {
                "client_id": k,
                "class_counts": [int(v) for v in self.clients[k].class_counts()],
                "alpha_cohort": int(self.cohort_of_client[k]),
            }
            for k in range(self.num_clients)
        ]


def _dirichlet_shares(alpha: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Symmetric Dirichlet draw via normalized Gamma(alpha, 1) variates.

    Concentrations down around 1e-3 underflow every Gamma draw to zero with
    high probability; that limit is a one-hot vector at a uniformly chosen
    component, so fall back to exactly that.
    """
    gammas = rng.gamma(shape=alpha, scale=1.0, size=size)
    total = gammas.sum()
    if total <= 0.0 or not np.isfinite(total):
        shares = np.zeros(size)
        shares[int(rng.integers(size))] = 1.0
        return shares
    return gammas / total


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that round the real targets.

    Floors every target, then hands the leftover units to the largest
    fractional remainders, breaking ties toward lower indices.
    """
    target = shares * total
    base = np.floor(target).astype(np.int64)
    leftover = total - int(base.sum())
    frac = target - base
    order = np.lexsort((np.arange(shares.size), -frac))
    base[order[:leftover]] += 1
    return base


def dirichlet_partition(pooled: ClientDataset, spec: PartitionSpec) -> Partition:
    """Split a pooled dataset across clients with per-cohort label skew.

    Each class's sample indices are shuffled and divided evenly across
    cohorts; within a cohort, clients receive class-i counts proportional
    to a Dirichlet share vector, rounded by largest remainder so per-class
    totals are conserved exactly. A client left empty by rounding takes
    one sample from the largest client in its cohort.
    """
    if pooled.num_samples == 0:
        raise DomainError("cannot partition an empty dataset")
    n_clients = spec.num_clients
    n_cohorts = len(spec.alphas)
    cohort_size = n_clients // n_cohorts
    rng = np.random.default_rng(spec.seed)
    cohort_of_client = [k // cohort_size for k in range(n_clients)]

    per_client: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for cls in range(pooled.num_classes):
        cls_idx = np.flatnonzero(pooled.labels == cls)
        cls_idx = cls_idx[rng.permutation(cls_idx.size)]
        parts = np.array_split(cls_idx, n_cohorts)
        for j, part in enumerate(parts):
            shares = _dirichlet_shares(spec.alphas[j], cohort_size, rng)
            counts = _largest_remainder(shares, part.size)
            offsets = np.concatenate(([0], np.cumsum(counts)))
            for local_k in range(cohort_size):
                client = j * cohort_size + local_k
                chunk = part[offsets[local_k] : offsets[local_k + 1]]
                if chunk.size:
                    per_client[client].append(chunk)

    totals = np.array(
        [sum(c.size for c in chunks) for chunks in per_client], dtype=np.int64
    )
    # rounding can starve a client entirely; repair by moving one sample
    # from the largest same-cohort client
    for client in range(n_clients):
        if totals[client] > 0:
            continue
        cohort = cohort_of_client[client]
        members = [k for k in range(n_clients) if cohort_of_client[k] == cohort]
        donor = max(members, key=lambda k: (totals[k], -k))
        if totals[donor] < 2:
            raise DomainError(
                f"cohort {cohort} too small to repair empty client {client}"
            )
        big = max(range(len(per_client[donor])), key=lambda i: per_client[donor][i].size)
        moved = per_client[donor][big][-1:]
        per_client[donor][big] = per_client[donor][big][:-1]
        per_client[client].append(moved)
        totals[donor] -= 1
        totals[client] += 1

    indices = [
        np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
        for chunks in per_client
    ]
    clients = [pooled.subset(idx) for idx in indices]
    return Partition(
        clients=clients,
        cohort_of_client=cohort_of_client,
        alphas=tuple(float(a) for a in spec.alphas),
        client_indices=indices,
    )
