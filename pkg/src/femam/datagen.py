"""Synthetic Gaussian-class data and the non-IID partitioners.

Partitioners work on index arrays into one labeled table and return a
``Partition``: one sorted index array per client plus the ground-truth
cluster structure, when the partitioner has one.  ``make_shards`` then cuts
each client's rows into stratified train/validation/test splits.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from femam import rng as streams
from femam.model import Batch

log = logging.getLogger(__name__)

CLUSTER_WISE = "cluster-wise"
DIRICHLET = "client-wise-dirichlet"
MULTI_LEVEL = "multi-level"
IID = "iid"
PARTITION_KINDS = (CLUSTER_WISE, DIRICHLET, MULTI_LEVEL, IID)


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int
    samples_per_class: int
    input_dim: int
    noise_std: float
    seed: int = 0
    mean_scale: float = 1.0

    def __post_init__(self):
        if min(self.num_classes, self.samples_per_class, self.input_dim) < 1:
            raise ValueError("num_classes, samples_per_class and input_dim must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


@dataclass(frozen=True)
class PartitionSpec:
    kind: str
    num_clients: int
    classes_per_cluster: int | None = None
    num_clusters: int | None = None
    alpha: float | None = None
    levels: tuple[tuple[int, int], ...] | None = None
    level_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in PARTITION_KINDS:
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be positive")
        if self.kind == DIRICHLET and not (self.alpha is not None and self.alpha > 0):
            raise ValueError("alpha must be > 0")
        if self.kind == CLUSTER_WISE and (self.classes_per_cluster is None or self.num_clusters is None):
            raise ValueError("cluster-wise needs classes_per_cluster and num_clusters")
        if self.kind == MULTI_LEVEL and not self.levels:
            raise ValueError("multi-level needs levels")


@dataclass
class GroundTruthStructure:
    """Per level, the true cluster id of every client (None where there is none)."""

    levels: list[np.ndarray | None] = field(default_factory=list)

    def to_json(self) -> list[list[int] | None]:
        return [None if row is None else [int(v) for v in row] for row in self.levels]

    @classmethod
    def from_json(cls, rows) -> "GroundTruthStructure":
        return cls([None if r is None else np.asarray(r, dtype=np.int64) for r in rows])


@dataclass
class Partition:
    indices: list[np.ndarray]
    ground_truth: GroundTruthStructure
    unused_classes: list[int] = field(default_factory=list)
    level_classes: list[list[int]] = field(default_factory=list)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    train: Batch
    validation: Batch
    test: Batch

    @property
    def n_i(self) -> int:
        return len(self.train)


def generate_dataset(spec: DatasetSpec) -> Batch:
    """Class c is N(m_c, noise_std^2 I); rows are grouped by class."""
    gen = streams.stream(spec.seed, streams.DATA)
    means = gen.normal(scale=spec.mean_scale, size=(spec.num_classes, spec.input_dim))
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    noise = gen.normal(size=(len(labels), spec.input_dim))
    return Batch(means[labels] + spec.noise_std * noise, labels)


def _apportion(total: int, weights: Sequence[float]) -> np.ndarray:
    """Integer shares of ``total`` proportional to ``weights`` (largest remainder)."""
    w = np.asarray(weights, dtype=np.float64)
    if total == 0 or w.sum() == 0:
        return np.zeros(len(w), dtype=np.int64)
    exact = total * w / w.sum()
    out = np.floor(exact).astype(np.int64)
    # stable sort: ties go to the lower index
    order = np.argsort(-(exact - out), kind="stable")
    out[order[: total - out.sum()]] += 1
    return out


def _client_blocks(num_clients: int, num_clusters: int) -> np.ndarray:
    """Contiguous client blocks; the first ``num_clients % num_clusters`` get one extra."""
    if num_clusters > num_clients:
        raise PartitionError(f"{num_clusters} clusters cannot be spread over {num_clients} clients")
    sizes = np.full(num_clusters, num_clients // num_clusters)
    sizes[: num_clients % num_clusters] += 1
    return np.repeat(np.arange(num_clusters), sizes)


def _cluster_wise(labels, rows, classes_per_cluster, num_clusters, num_clients, gen):
    classes = np.unique(labels[rows])
    n_classes = len(classes)
    if classes_per_cluster > n_classes:
        raise PartitionError(f"classes_per_cluster={classes_per_cluster} exceeds the {n_classes} classes available")
    if classes_per_cluster < 1 or num_clusters < 1:
        raise PartitionError("classes_per_cluster and num_clusters must be positive")
    owner = _client_blocks(num_clients, num_clusters)
    members = [np.flatnonzero(owner == k) for k in range(num_clusters)]
    perm = gen.permutation(classes)
    # disjoint blocks while they fit, wrapping around (overlap) once they do not
    cluster_classes = [
        perm[(k * classes_per_cluster + np.arange(classes_per_cluster)) % n_classes] for k in range(num_clusters)
    ]
    claimed = {int(c): [] for c in classes}
    for k, cls in enumerate(cluster_classes):
        for c in cls:
            claimed[int(c)].append(k)

    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    unused = []
    for c in classes:
        owners = claimed[int(c)]
        idx = rows[labels[rows] == c]
        if not owners:
            unused.append(int(c))
            continue
        idx = gen.permutation(idx)
        for k, share in zip(owners, np.array_split(idx, len(owners))):
            for client, piece in zip(members[k], np.array_split(share, len(members[k]))):
                parts[client].append(piece)
    indices = [np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts]
    return indices, owner, unused


def _check_nonempty(indices):
    empty = [i for i, idx in enumerate(indices) if len(idx) == 0]
    if empty:
        raise PartitionError(f"clients {empty} received no samples; add samples or reduce clients")


def partition_iid(table: Batch, num_clients: int, seed: int) -> Partition:
    gen = streams.stream(seed, streams.PARTITION, 0)
    if len(table) < num_clients:
        raise PartitionError("fewer samples than clients")
    chunks = np.array_split(gen.permutation(len(table)), num_clients)
    return Partition([np.sort(c) for c in chunks], GroundTruthStructure([None]))


def partition_cluster_wise(
    table: Batch, classes_per_cluster: int, num_clusters: int, num_clients: int, seed: int
) -> Partition:
    """Give each cluster of clients its own class subset.

    Clusters take disjoint class blocks from a seeded class permutation when
    ``classes_per_cluster * num_clusters`` fits in the class count and wrap
    around otherwise, so a class may belong to several clusters.  Such a
    class's samples are split evenly between its clusters; each cluster's
    share is split evenly over the cluster's (contiguous) clients.  Classes no
    cluster claims are left out and listed in ``unused_classes``.
    """
    gen = streams.stream(seed, streams.PARTITION, 1)
    rows = np.arange(len(table))
    indices, owner, unused = _cluster_wise(table.labels, rows, classes_per_cluster, num_clusters, num_clients, gen)
    if unused:
        log.warning("cluster-wise partition leaves classes %s unassigned", unused)
    _check_nonempty(indices)
    return Partition(indices, GroundTruthStructure([owner]), unused)


def partition_dirichlet(table: Batch, alpha: float, num_clients: int, seed: int) -> Partition:
    """Per class, split its samples over clients by one Dirichlet(alpha) draw."""
    if not alpha > 0:
        raise PartitionError("alpha must be > 0")
    if len(table) < num_clients:
        raise PartitionError("fewer samples than clients")
    gen = streams.stream(seed, streams.PARTITION, 2)
    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in np.unique(table.labels):
        idx = gen.permutation(np.flatnonzero(table.labels == c))
        p = gen.dirichlet(np.full(num_clients, alpha))
        cuts = (np.cumsum(p)[:-1] * len(idx)).astype(np.int64)
        for client, piece in enumerate(np.split(idx, cuts)):
            parts[client].append(piece)
    indices = [np.sort(np.concatenate(p)) for p in parts]
    # n_i > 0 is required downstream: move one sample from the largest client
    while True:
        sizes = np.array([len(i) for i in indices])
        empty = np.flatnonzero(sizes == 0)
        if len(empty) == 0:
            break
        donor = int(np.argmax(sizes))
        indices[int(empty[0])] = indices[donor][-1:]
        indices[donor] = indices[donor][:-1]
    return Partition(indices, GroundTruthStructure([None]))


def default_level_weights(levels: Sequence[tuple[int, int]]) -> np.ndarray:
    w = np.array([1.0 / k for _, k in levels])
    return w / w.sum()


def partition_multi_level(
    table: Batch,
    levels: Sequence[tuple[int, int]],
    num_clients: int,
    seed: int,
    level_weights: Sequence[float] | None = None,
) -> Partition:
    """Split the classes into disjoint per-level groups, then partition each level cluster-wise.

    ``levels`` lists ``(classes_per_cluster, num_clusters)`` per level.  Each
    level receives a number of classes proportional to its weight, so with
    balanced classes its sample mass is proportional to the weight too.  A
    client's rows are the union of what it receives at every level.
    """
    if len(levels) < 2:
        raise PartitionError("multi-level partition needs at least two levels")
    weights = default_level_weights(levels) if level_weights is None else np.asarray(level_weights, float)
    if len(weights) != len(levels) or np.any(weights <= 0):
        raise PartitionError("level_weights must be positive, one per level")
    classes = np.unique(table.labels)
    counts = _apportion(len(classes), weights)
    need = np.array([k for k, _ in levels])
    if np.any(counts < need):
        raise PartitionError(
            f"{len(classes)} classes split as {counts.tolist()} cannot give every level its "
            f"classes_per_cluster {need.tolist()}"
        )
    gen = streams.stream(seed, streams.PARTITION, 3)
    perm = gen.permutation(classes)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    truth, unused, per_level = [], [], []
    for level, (k_c, m_l) in enumerate(levels):
        level_classes = perm[bounds[level] : bounds[level + 1]]
        per_level.append(sorted(int(c) for c in level_classes))
        rows = np.flatnonzero(np.isin(table.labels, level_classes))
        level_gen = streams.stream(seed, streams.PARTITION, 4, level)
        idx, owner, dropped = _cluster_wise(table.labels, rows, k_c, m_l, num_clients, level_gen)
        for client, piece in enumerate(idx):
            parts[client].append(piece)
        truth.append(owner)
        unused.extend(dropped)
    if unused:
        log.warning("multi-level partition leaves classes %s unassigned", sorted(unused))
    indices = [np.sort(np.concatenate(p)) for p in parts]
    _check_nonempty(indices)
    return Partition(indices, GroundTruthStructure(truth), sorted(unused), per_level)


def partition(table: Batch, spec: PartitionSpec, seed: int) -> Partition:
    if spec.kind == IID:
        return partition_iid(table, spec.num_clients, seed)
    if spec.kind == CLUSTER_WISE:
        return partition_cluster_wise(table, spec.classes_per_cluster, spec.num_clusters, spec.num_clients, seed)
    if spec.kind == DIRICHLET:
        return partition_dirichlet(table, spec.alpha, spec.num_clients, seed)
    return partition_multi_level(table, spec.levels, spec.num_clients, seed, spec.level_weights)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_train_val_test(
    shard: Batch, val_fraction: float, test_fraction: float, seed: int, client_id: int = 0
) -> ClientShard:
    """Stratified, seeded split of one client's rows.

    Split sizes are ``round(fraction * n)`` (at least 1); within each split the
    per-class counts follow the class proportions by largest remainder.
    """
    if not (0 < val_fraction < 1 and 0 < test_fraction < 1 and val_fraction + test_fraction < 1):
        raise ValueError("fractions must lie in (0, 1) and sum to less than 1")
    n = len(shard)
    n_val = max(1, _round_half_up(val_fraction * n))
    n_test = max(1, _round_half_up(test_fraction * n))
    if n - n_val - n_test < 1:
        raise PartitionError(f"client {client_id}: {n} samples cannot fill train, validation and test")
    classes, counts = np.unique(shard.labels, return_counts=True)
    val_q = _apportion(n_val, counts)
    test_q = _apportion(n_test, counts - val_q)
    gen = streams.stream(seed, streams.SPLIT, client_id)
    val, test, train = [], [], []
    for c, v, t in zip(classes, val_q, test_q):
        idx = gen.permutation(np.flatnonzero(shard.labels == c))
        val.append(idx[:v])
        test.append(idx[v : v + t])
        train.append(idx[v + t :])
    pick = lambda parts: shard.take(np.sort(np.concatenate(parts)))  # noqa: E731
    return ClientShard(client_id, pick(train), pick(val), pick(test))


def make_shards(
    table: Batch, part: Partition, val_fraction: float, test_fraction: float, seed: int
) -> list[ClientShard]:
    return [
        split_train_val_test(table.take(idx), val_fraction, test_fraction, seed, client_id=i)
        for i, idx in enumerate(part.indices)
    ]


# -- serialization -------------------------------------------------------------

SPLITS = ("train", "validation", "test")


def _write_csv(path: Path, batch: Batch) -> None:
    d = batch.features.shape[1]
    header = ",".join([f"x{j}" for j in range(d)] + ["label"])
    lines = [header]
    for row, label in zip(batch.features, batch.labels):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(label)}")
    path.write_text("\n".join(lines) + "\n")


def _read_csv(path: Path) -> Batch:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Batch(data[:, :-1], data[:, -1].astype(np.int64))


def save_shards(directory: str | Path, shards: Sequence[ClientShard], metadata: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = dict(metadata)
    meta["num_clients"] = len(shards)
    meta["sizes"] = [[len(getattr(s, split)) for split in SPLITS] for s in shards]
    (directory / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for s in shards:
        for split in SPLITS:
            _write_csv(directory / f"client_{s.client_id:03d}_{split}.csv", getattr(s, split))
    return directory


def load_shards(directory: str | Path) -> tuple[list[ClientShard], dict]:
    directory = Path(directory)
    meta = json.loads((directory / "metadata.json").read_text())
    shards = []
    for i in range(meta["num_clients"]):
        parts = [_read_csv(directory / f"client_{i:03d}_{split}.csv") for split in SPLITS]
        shards.append(ClientShard(i, *parts))
    return shards, meta


def describe(dataset: DatasetSpec, spec: PartitionSpec, part: Partition, seed: int) -> dict:
    """JSON-ready metadata for a shard directory."""
    pspec = {k: v for k, v in asdict(spec).items() if v is not None}
    if "levels" in pspec:
        pspec["levels"] = [list(x) for x in pspec["levels"]]
    if "level_weights" in pspec:
        pspec["level_weights"] = list(pspec["level_weights"])
    return {
        "dataset": asdict(dataset),
        "partition": pspec,
        "seed": seed,
        "ground_truth": part.ground_truth.to_json(),
        "unused_classes": part.unused_classes,
        "level_classes": part.level_classes,
    }
