"""Level-wise federated primitives: broadcast, aggregate, assignment, local updates, objectives."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from femam.model import Batch, EmptyBatchError, PredictorSpec, cross_entropy, loss_and_grad_offset, predict_additive

GLOBAL = "global"
CLUSTER = "cluster"
PERSONALIZED = "personalized"
LEVEL_KINDS = (GLOBAL, CLUSTER, PERSONALIZED)

PRUNED = -1


@dataclass
class LevelBank:
    """Shared models of one level, one row per model."""

    level_id: int
    kind: str
    models: np.ndarray
    lam: float = 0.0
    stale: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.kind not in LEVEL_KINDS:
            raise ValueError(f"unknown level kind {self.kind!r}")
        self.models = np.atleast_2d(np.asarray(self.models, dtype=np.float64))
        if self.stale is None:
            self.stale = np.zeros(len(self.models), dtype=np.int64)

    @property
    def size(self) -> int:
        return len(self.models)

    def copy(self) -> "LevelBank":
        return replace(self, models=self.models.copy(), stale=self.stale.copy())


class MappingTable:
    """C_l(i) for every level added so far; PRUNED marks a client removed from a level."""

    def __init__(self, num_clients: int):
        self.num_clients = num_clients
        self.rows: list[np.ndarray] = []

    def add_level(self, row) -> int:
        row = np.asarray(row, dtype=np.int64).copy()
        if row.shape != (self.num_clients,):
            raise ValueError("mapping row must have one entry per client")
        self.rows.append(row)
        return len(self.rows) - 1

    def __getitem__(self, level: int) -> np.ndarray:
        return self.rows[level]

    def __setitem__(self, level: int, row) -> None:
        self.rows[level] = np.asarray(row, dtype=np.int64).copy()

    def __len__(self) -> int:
        return len(self.rows)

    def prune(self, level: int, client: int) -> None:
        self.rows[level][client] = PRUNED

    def active(self, level: int) -> np.ndarray:
        return np.flatnonzero(self.rows[level] != PRUNED)

    def matrix(self) -> np.ndarray:
        return np.array(self.rows, dtype=np.int64).reshape(len(self.rows), self.num_clients)


def global_row(num_clients: int) -> np.ndarray:
    return np.zeros(num_clients, dtype=np.int64)


def personalized_row(num_clients: int) -> np.ndarray:
    return np.arange(num_clients, dtype=np.int64)


def broadcast(bank: LevelBank, row: np.ndarray) -> dict[int, np.ndarray]:
    """Each active client gets its own copy of the model it maps to."""
    return {int(i): bank.models[k].copy() for i, k in enumerate(row) if k != PRUNED}


def group_weights(row: np.ndarray, n: Sequence[float], k: int) -> tuple[np.ndarray, np.ndarray]:
    """Members of model ``k`` in ascending id order and their normalized sample weights."""
    members = np.flatnonzero(row == k)
    counts = np.asarray(n, dtype=np.float64)[members]
    total = counts.sum()
    return members, (counts / total if total > 0 else counts)


def aggregate(
    bank: LevelBank, row: np.ndarray, local: Mapping[int, np.ndarray] | np.ndarray, n: Sequence[float]
) -> LevelBank:
    """Sample-weighted mean of the members' local models, per shared model.

    Members are summed in ascending client id, so the result does not depend
    on the order clients finished training.  A model with no member (or zero
    total weight) keeps its old value.
    """
    counts = np.asarray(n, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("sample counts must be nonnegative")
    out = bank.copy()
    for k in range(bank.size):
        members, weights = group_weights(row, counts, k)
        if len(members) == 0 or counts[members].sum() == 0:
            continue
        acc = np.zeros(bank.models.shape[1])
        for i, w in zip(members, weights):
            acc = acc + w * local[int(i)]
        out.models[k] = acc
    return out


def sq_distances(bank: LevelBank, theta: np.ndarray) -> np.ndarray:
    diff = bank.models - theta
    return np.einsum("kd,kd->k", diff, diff)


def assign_clusters(bank: LevelBank, local: Mapping[int, np.ndarray] | np.ndarray, row: np.ndarray) -> np.ndarray:
    """Nearest centroid per active client, ties to the lowest index; PRUNED stays."""
    if bank.kind != CLUSTER:
        raise ValueError("assignment only applies to cluster levels")
    new = np.asarray(row, dtype=np.int64).copy()
    for i in np.flatnonzero(new != PRUNED):
        new[i] = int(np.argmin(sq_distances(bank, local[int(i)])))
    return new


def reseed_empty(
    bank: LevelBank, row: np.ndarray, local: Mapping[int, np.ndarray] | np.ndarray
) -> tuple[LevelBank, np.ndarray]:
    """Track empty centroids; one still empty after a second round is moved onto a client.

    The donor is the active client farthest from its centroid among clusters
    with at least two members.  It is reassigned to the reseeded centroid,
    which sits exactly on it, so the EM objective cannot grow.
    """
    bank = bank.copy()
    row = np.asarray(row, dtype=np.int64).copy()
    for k in range(bank.size):
        if np.any(row == k):
            bank.stale[k] = 0
            continue
        bank.stale[k] += 1
        if bank.stale[k] < 2:
            continue
        sizes = np.bincount(row[row != PRUNED], minlength=bank.size)
        best, best_d = None, -1.0
        for i in np.flatnonzero(row != PRUNED):
            if sizes[row[i]] < 2:
                continue
            d = float(np.sum((local[int(i)] - bank.models[row[i]]) ** 2))
            if d > best_d:
                best, best_d = int(i), d
        if best is None:
            continue
        bank.models[k] = local[best].copy()
        row[best] = k
        bank.stale[k] = 0
    return bank, row


# -- local updates -------------------------------------------------------------


def _descend(
    batch: Batch,
    theta: np.ndarray,
    spec: PredictorSpec,
    lr: float,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    offset: np.ndarray | None,
    anchor: np.ndarray | None = None,
    lam: float = 0.0,
    weight: float = 1.0,
    monitor=None,
) -> np.ndarray:
    n = len(batch)
    if n == 0:
        raise EmptyBatchError("client has no training data")
    x, y = batch.features, batch.labels
    theta = np.array(theta, dtype=np.float64)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            # a full batch is the same set of rows; natural order keeps it equal to the full gradient
            idx = order[start : start + batch_size] if batch_size < n else slice(None)
            _, g = loss_and_grad_offset(x[idx], y[idx], None if offset is None else offset[idx], theta, spec)
            if monitor is not None:
                monitor.step(theta, g)
            if anchor is None:
                theta = theta - lr * g
            else:
                theta = (1.0 - lr * lam) * theta + (lr * lam) * anchor - lr * (weight * g)
    return theta


def local_update_global(
    batch: Batch,
    theta: np.ndarray,
    spec: PredictorSpec,
    lr: float,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    offset: np.ndarray | None = None,
    monitor=None,
) -> np.ndarray:
    """Mini-batch gradient descent on one level; ``offset`` carries the frozen levels' logits."""
    return _descend(batch, theta, spec, lr, epochs, batch_size, rng, offset, monitor=monitor)


def local_update_cluster(
    batch: Batch,
    theta: np.ndarray,
    centroid: np.ndarray,
    spec: PredictorSpec,
    lr: float,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    lam: float,
    n_i: float,
    n: float,
    offset: np.ndarray | None = None,
    weight_gradient: bool = True,
    monitor=None,
) -> np.ndarray:
    """Proximal step toward the assigned centroid plus the data gradient.

    Each step is ``(1 - lr*lam) * theta + lr*lam * centroid - lr * w * grad``
    with ``w = n_i / n`` (or 1 when ``weight_gradient`` is off).
    """
    if lr * lam >= 1:
        warnings.warn(f"lr*lam = {lr * lam:g} >= 1: the proximal step overshoots the centroid", stacklevel=2)
    weight = n_i / n if weight_gradient else 1.0
    return _descend(
        batch, theta, spec, lr, epochs, batch_size, rng, offset,
        anchor=np.asarray(centroid, dtype=np.float64), lam=lam, weight=weight, monitor=monitor,
    )


def local_update_personalized(
    batch: Batch,
    theta: np.ndarray,
    spec: PredictorSpec,
    lr: float,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    offset: np.ndarray | None = None,
    monitor=None,
) -> np.ndarray:
    return _descend(batch, theta, spec, lr, epochs, batch_size, rng, offset, monitor=monitor)


# -- objectives ----------------------------------------------------------------


def em_objective_F(
    banks: Sequence[LevelBank],
    mapping: MappingTable,
    local: Mapping[int, Mapping[int, np.ndarray] | np.ndarray],
    n: Sequence[float],
) -> float:
    """Weighted squared distance of local cluster-level models to their centroids.

    ``local[level]`` maps client id to that client's local model at the level;
    levels without local models (e.g. not yet trained) are skipped.
    """
    counts = np.asarray(n, dtype=np.float64)
    total = counts.sum()
    value = 0.0
    for level, bank in enumerate(banks):
        if bank.kind != CLUSTER or level not in local:
            continue
        row = mapping[level]
        for i in np.flatnonzero(row != PRUNED):
            d = local[level][int(i)] - bank.models[row[i]]
            value += counts[i] / total * float(d @ d)
    return value


def client_models(banks: Sequence[LevelBank], mapping: MappingTable, client: int) -> list[np.ndarray]:
    """The models a client adds up: one per level it was not pruned from."""
    return [bank.models[mapping[l][client]] for l, bank in enumerate(banks) if mapping[l][client] != PRUNED]


def fl_objective_R(
    batches: Sequence[Batch], banks: Sequence[LevelBank], mapping: MappingTable, spec: PredictorSpec
) -> float:
    """Sample-weighted training loss of every client's additive prediction."""
    counts = np.array([len(b) for b in batches], dtype=np.float64)
    losses = [
        cross_entropy(predict_additive(b, client_models(banks, mapping, i), spec), b.labels)
        for i, b in enumerate(batches)
    ]
    return float(np.dot(counts / counts.sum(), losses))
