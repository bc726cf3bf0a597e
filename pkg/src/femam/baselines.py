"""Comparison algorithms: Local, FedAvg, FeSEM and their fine-tuned "+" variants.

Each runs a fixed number of rounds and shares the engine's random streams,
so with the same seed FedAvg replays FeMAM's first level exactly and
FeSEM with one cluster (no proximal pull, unweighted gradient) replays FedAvg.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from femam import rng as streams
from femam.datagen import ClientShard
from femam.engine import farthest_first_seed
from femam.metrics import evaluate
from femam.model import PredictorSpec, cross_entropy, forward, init_params
from femam.protocol import (
    CLUSTER,
    GLOBAL,
    LevelBank,
    MappingTable,
    aggregate,
    assign_clusters,
    broadcast,
    em_objective_F,
    local_update_cluster,
    local_update_global,
    reseed_empty,
)
from femam.records import RoundMetrics, RunRecord

ALGORITHMS = ("local", "fedavg", "fedavg+", "fesem", "fesem+")


@dataclass
class BaselineConfig:
    algorithm: str = "fedavg"
    rounds: int = 100
    lr: float = 0.01
    local_epochs: int = 2
    batch_size: int = 64
    clusters: int = 5
    lam: float = 0.1
    weight_cluster_gradient: bool = True
    centroid_seeding: str = "zero"
    centroid_init_scale: float = 1e-3
    finetune_epochs: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.rounds < 0 or self.finetune_epochs < 0:
            raise ValueError("rounds and finetune_epochs must be nonnegative")
        if min(self.local_epochs, self.batch_size, self.clusters) < 1:
            raise ValueError("local_epochs, batch_size and clusters must be positive")
        if self.lr < 0 or self.lam < 0:
            raise ValueError("lr and lam must be nonnegative")

    def as_dict(self) -> dict:
        return asdict(self)


def _counts(shards) -> np.ndarray:
    return np.array([s.n_i for s in shards], dtype=np.float64)


def _evaluate(shards, models, spec: PredictorSpec):
    logits = [forward(s.test.features, th, spec) for s, th in zip(shards, models)]
    return evaluate(logits, [s.test.labels for s in shards], _counts(shards), spec.num_classes)


def _val_loss(shards, models, spec) -> float:
    n = _counts(shards)
    losses = [cross_entropy(forward(s.validation.features, th, spec), s.validation.labels) for s, th in zip(shards, models)]
    return float(np.dot(n / n.sum(), losses))


def _train_loss(shards, models, spec) -> float:
    n = _counts(shards)
    losses = [cross_entropy(forward(s.train.features, th, spec), s.train.labels) for s, th in zip(shards, models)]
    return float(np.dot(n / n.sum(), losses))


def _log_round(record, shards, spec, models, t, F=0.0, transfers=0):
    # clients that exchanged a model this round; local training involves none
    res = _evaluate(shards, models, spec)
    record.rounds.append(
        RoundMetrics(
            round=t, level=0, level_round=t, accuracy=res.overall_accuracy, macro_f1=res.mean_macro_f1,
            val_loss=_val_loss(shards, models, spec), F=F, R=_train_loss(shards, models, spec),
            grad_norm_max=float("nan"), lr_applied=record.config["lr"], lr_bound=float("nan"),
            bound_violated=False, active=transfers, down=transfers, up=transfers,
        )
    )
    record.flag("finite_parameters", bool(np.all(np.isfinite(models))), f"round {t}: non-finite parameters")


def _finish(record, shards, spec, models):
    record.client_models = [np.array(m) for m in models]
    record.final = _evaluate(shards, models, spec)
    record.final_val_loss = np.array(
        [cross_entropy(forward(s.validation.features, th, spec), s.validation.labels) for s, th in zip(shards, models)]
    )
    record.level_add_rounds = [0]
    return record


def run_local(shards: list[ClientShard], spec: PredictorSpec, config: BaselineConfig) -> RunRecord:
    """Every client trains its own copy of the shared initial model; nothing is exchanged."""
    cfg = config
    record = RunRecord("local", cfg.as_dict())
    theta0 = init_params(spec, streams.stream(cfg.seed, streams.INIT, 0))
    models = [theta0.copy() for _ in shards]
    for t in range(cfg.rounds):
        for i, s in enumerate(shards):
            gen = streams.stream(cfg.seed, streams.SHUFFLE, 0, i, t)
            models[i] = local_update_global(s.train, models[i], spec, cfg.lr, cfg.local_epochs, cfg.batch_size, gen)
        _log_round(record, shards, spec, models, t)
    record.models["clients"] = np.array(models)
    return _finish(record, shards, spec, models)


def run_fedavg(shards: list[ClientShard], spec: PredictorSpec, config: BaselineConfig) -> RunRecord:
    cfg = config
    record = RunRecord("fedavg", cfg.as_dict())
    n = _counts(shards)
    bank = LevelBank(0, GLOBAL, init_params(spec, streams.stream(cfg.seed, streams.INIT, 0))[None])
    row = np.zeros(len(shards), dtype=np.int64)
    for t in range(cfg.rounds):
        received = broadcast(bank, row)
        uploads = {}
        for i in sorted(received):
            gen = streams.stream(cfg.seed, streams.SHUFFLE, 0, i, t)
            uploads[i] = local_update_global(
                shards[i].train, received[i], spec, cfg.lr, cfg.local_epochs, cfg.batch_size, gen
            )
        bank = aggregate(bank, row, uploads, n)
        record.history.append(bank.models.copy())
        _log_round(record, shards, spec, [bank.models[0]] * len(shards), t, transfers=len(received))
    record.models["level0"] = bank.models
    record.structure = row[None]
    return _finish(record, shards, spec, [bank.models[0]] * len(shards))


def run_fesem(shards: list[ClientShard], spec: PredictorSpec, config: BaselineConfig) -> RunRecord:
    """Single-level clustered training: local proximal steps, nearest-centroid assignment, per-cluster averaging."""
    cfg = config
    record = RunRecord("fesem", cfg.as_dict())
    m, n = len(shards), _counts(shards)
    k = cfg.clusters
    if k > m:
        raise ValueError(f"{k} clusters need at least as many clients (got {m})")
    # all centroids start at the shared initial model, all but the first nudged apart
    gen = streams.stream(cfg.seed, streams.INIT, 0)
    theta0 = init_params(spec, gen)
    models = [theta0] + [theta0 + init_params(spec, gen, scale=cfg.centroid_init_scale) for _ in range(k - 1)]
    bank = LevelBank(0, CLUSTER, np.array(models), lam=cfg.lam)
    row = np.empty(m, dtype=np.int64)
    row[streams.stream(cfg.seed, streams.MAPPING, 0).permutation(m)] = np.arange(m) % k
    mapping = MappingTable(m)
    mapping.add_level(row)
    for t in range(cfg.rounds):
        received = broadcast(bank, row)
        uploads = {}
        for i in sorted(received):
            g = streams.stream(cfg.seed, streams.SHUFFLE, 0, i, t)
            uploads[i] = local_update_cluster(
                shards[i].train, received[i], bank.models[row[i]], spec, cfg.lr, cfg.local_epochs, cfg.batch_size,
                g, cfg.lam, n[i], n.sum(), weight_gradient=cfg.weight_cluster_gradient,
            )
        if t == 0 and cfg.centroid_seeding == "farthest":
            bank = farthest_first_seed(bank, uploads, n, streams.stream(cfg.seed, streams.MAPPING, 0, 1))
        row = assign_clusters(bank, uploads, row)
        bank, row = reseed_empty(bank, row, uploads)
        bank = aggregate(bank, row, uploads, n)
        mapping[0] = row
        record.history.append(bank.models.copy())
        F = em_objective_F([bank], mapping, {0: uploads}, n)
        _log_round(record, shards, spec, [bank.models[row[i]] for i in range(m)], t, F=F, transfers=len(received))
    record.models["level0"] = bank.models
    record.structure = row[None]
    return _finish(record, shards, spec, [bank.models[row[i]] for i in range(m)])


def finetune_plus(
    base: RunRecord, shards: list[ClientShard], spec: PredictorSpec, epochs: int = 2,
    lr: float | None = None, batch_size: int | None = None, seed: int | None = None,
) -> RunRecord:
    """Copies of each client's final model, trained a few more epochs on its own data."""
    cfg = base.config
    lr = cfg["lr"] if lr is None else lr
    batch_size = cfg["batch_size"] if batch_size is None else batch_size
    seed = cfg["seed"] if seed is None else seed
    models = []
    for i, (s, theta) in enumerate(zip(shards, base.client_models)):
        if epochs == 0:
            models.append(theta.copy())
            continue
        gen = streams.stream(seed, streams.FINETUNE, i)
        models.append(local_update_global(s.train, theta, spec, lr, epochs, batch_size, gen))
    config = dict(cfg, algorithm=base.algorithm + "+", finetune_epochs=epochs)
    record = replace(base, algorithm=base.algorithm + "+", config=config, models=dict(base.models))
    record.models["clients"] = np.array(models)
    return _finish(record, shards, spec, models)


def run_baseline(shards: list[ClientShard], spec: PredictorSpec, config: BaselineConfig) -> RunRecord:
    algo = config.algorithm
    if algo == "local":
        return run_local(shards, spec, config)
    base = run_fedavg(shards, spec, config) if algo.startswith("fedavg") else run_fesem(shards, spec, config)
    if algo.endswith("+"):
        return finetune_plus(base, shards, spec, config.finetune_epochs)
    return base
