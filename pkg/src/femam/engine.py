"""Progressive multi-level training: one level at a time, earlier levels frozen, pruning per client.

Each stage adds a level, runs communication rounds (broadcast, local
training of the newest level only, upload, reassignment on cluster
levels, aggregation) until the accuracy curve settles, then lets every
client drop the new level if it does not lower its validation loss.

Frozen levels enter a client's prediction through cached logits: after a
stage ends, the retained model's logits are added to the client's cached
prefix for every split.  A newly added level sees exactly the sum it would
get from ``predict_additive`` over the retained levels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from femam import rng as streams
from femam.datagen import ClientShard
from femam.diagnostics import Trace, lr_bound_theorem1
from femam.metrics import evaluate
from femam.model import (
    LINEAR,
    Batch,
    EmptyBatchError,
    PredictorSpec,
    cross_entropy,
    forward,
    init_params,
    linear_grad_norm_bound,
    predict_additive,
)
from femam.protocol import (
    CLUSTER,
    GLOBAL,
    LEVEL_KINDS,
    PERSONALIZED,
    PRUNED,
    LevelBank,
    MappingTable,
    aggregate,
    assign_clusters,
    broadcast,
    em_objective_F,
    local_update_cluster,
    local_update_global,
    local_update_personalized,
    reseed_empty,
)
from femam.records import RoundMetrics, RunRecord

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
SEEDINGS = ("zero", "farthest")


def default_schedule(levels: int) -> tuple[str, ...]:
    if levels == 1:
        return (GLOBAL,)
    return (GLOBAL,) + (CLUSTER,) * (levels - 2) + (PERSONALIZED,)


@dataclass
class EngineConfig:
    max_levels: int = 5
    schedule: tuple[str, ...] | None = None
    clusters_per_level: int = 5
    lr: float = 0.01
    local_epochs: int = 2
    rounds_level1: int = 400
    max_rounds_per_level: int = 500
    window: int = 50
    variance_threshold: float = 1.0
    prune_epsilon: float = 0.0
    prune_first_level: bool = False
    lam: float = 0.1
    batch_size: int = 64
    seed: int = 0
    weight_cluster_gradient: bool = True
    clamp_lr_to_bound: bool = False
    grad_bound: float | None = None
    centroid_init_scale: float = 1e-3
    centroid_seeding: str = "zero"
    record_trace: bool = True
    keep_trace_vectors: bool = False
    keep_history: bool = False

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = default_schedule(self.max_levels)
        self.schedule = tuple(self.schedule)
        if self.max_levels < 1 or len(self.schedule) != self.max_levels:
            raise ValueError("max_levels must be >= 1 and match the schedule length")
        unknown = set(self.schedule) - set(LEVEL_KINDS)
        if unknown:
            raise ValueError(f"unknown level kinds {sorted(unknown)}")
        for name in ("variance_threshold", "prune_epsilon", "lam", "lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if min(self.local_epochs, self.batch_size, self.window, self.clusters_per_level) < 1:
            raise ValueError("local_epochs, batch_size, window and clusters_per_level must be positive")
        if self.centroid_seeding not in SEEDINGS:
            raise ValueError(f"centroid_seeding must be one of {SEEDINGS}")
        if self.rounds_level1 < 0 or self.max_rounds_per_level < 1:
            raise ValueError("round budgets must be positive")

    def as_dict(self) -> dict:
        out = asdict(self)
        out["schedule"] = list(self.schedule)
        return out


def check_level_converged(history, window: int, threshold: float) -> bool:
    """Population variance of the last ``window`` accuracies (percent) below ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    if len(history) < window:
        return False
    return float(np.var(np.asarray(history[-window:], dtype=np.float64))) < threshold


def should_prune(labels: np.ndarray, prefix_logits: np.ndarray, new_logits: np.ndarray, epsilon: float):
    """Drop the newest level when it lowers validation loss by at most ``epsilon``.

    Returns (prune, loss without the level, loss with it).
    """
    if len(labels) == 0:
        raise EmptyBatchError("pruning needs validation data")
    before = cross_entropy(prefix_logits, labels)
    after = cross_entropy(prefix_logits + new_logits, labels)
    return before - after <= epsilon, before, after


def prune_level(validation: Batch, prefix_models, new_model, spec: PredictorSpec, epsilon: float) -> bool:
    """Keep/prune decision for one client from its retained levels and the newest model."""
    prefix = predict_additive(validation, prefix_models, spec)
    return should_prune(validation.labels, prefix, forward(validation.features, new_model, spec), epsilon)[0]


class _NormOnly:
    def __init__(self):
        self.max_norm = 0.0

    def step(self, theta, g):
        self.max_norm = max(self.max_norm, float(np.linalg.norm(g)))


class _Monitor:
    """Wraps the trace monitor and keeps the largest gradient norm seen this round."""

    def __init__(self, inner):
        self.inner, self.max_norm = inner, 0.0

    def step(self, theta, g):
        self.max_norm = max(self.max_norm, float(np.linalg.norm(g)))
        self.inner.step(theta, g)


@dataclass
class _State:
    shards: list[ClientShard]
    spec: PredictorSpec
    config: EngineConfig
    n: np.ndarray
    banks: list[LevelBank] = field(default_factory=list)
    mapping: MappingTable = None
    local: dict[int, np.ndarray] = field(default_factory=dict)
    prefix: dict[str, list[np.ndarray]] = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.shards)

    def logits(self, split: str, level: int, client: int, theta: np.ndarray) -> np.ndarray:
        x = getattr(self.shards[client], split).features
        return self.prefix[split][client] + forward(x, theta, self.spec)


def _grad_bound(shards, spec: PredictorSpec, config: EngineConfig) -> float:
    if config.grad_bound is not None:
        return float(config.grad_bound)
    if spec.kind == LINEAR:
        return max(linear_grad_norm_bound(s.train.features) for s in shards)
    return math.nan


def _init_level(state: _State, level: int, kind: str) -> tuple[LevelBank, np.ndarray, np.ndarray]:
    cfg, spec, m = state.config, state.spec, state.m
    gen = streams.stream(cfg.seed, streams.INIT, level)
    if kind == GLOBAL:
        models = init_params(spec, gen)[None]
        row = np.zeros(m, dtype=np.int64)
        local = np.repeat(models, m, axis=0)
    elif kind == CLUSTER:
        k = cfg.clusters_per_level
        if k > m:
            raise ValueError(f"{k} clusters need at least as many clients (got {m})")
        models = np.array([init_params(spec, gen, scale=cfg.centroid_init_scale) for _ in range(k)])
        row = np.empty(m, dtype=np.int64)
        row[streams.stream(cfg.seed, streams.MAPPING, level).permutation(m)] = np.arange(m) % k
        local = np.array([init_params(spec, streams.stream(cfg.seed, streams.CLIENT_INIT, level, i)) for i in range(m)])
    else:
        models = np.array([init_params(spec, gen, scale=cfg.centroid_init_scale) for _ in range(m)])
        row = np.arange(m, dtype=np.int64)
        local = models.copy()
    return LevelBank(level, kind, models, lam=cfg.lam if kind == CLUSTER else 0.0), row, local


def farthest_first_seed(bank: LevelBank, local: dict[int, np.ndarray], n: np.ndarray, gen: np.random.Generator) -> LevelBank:
    """Centroids on uploaded client models: a random first pick, then repeatedly the farthest client."""
    ids = np.array(sorted(local))
    pts = np.array([local[i] for i in ids])
    out = bank.copy()
    chosen = [int(gen.choice(len(ids), p=n[ids] / n[ids].sum()))]
    d2 = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
    for _ in range(1, min(bank.size, len(ids))):
        pick = int(np.argmax(d2))
        chosen.append(pick)
        d2 = np.minimum(d2, np.sum((pts - pts[pick]) ** 2, axis=1))
    for k, j in enumerate(chosen):
        out.models[k] = pts[j]
    return out


def _local_steps(n_i: int, config: EngineConfig) -> int:
    return config.local_epochs * math.ceil(n_i / config.batch_size)


def _train_client(state: _State, level: int, kind: str, client: int, theta, centroid, lr, rng, monitor):
    cfg, shard = state.config, state.shards[client]
    offset = state.prefix["train"][client]
    if not offset.any():
        offset = None
    if kind == GLOBAL:
        return local_update_global(shard.train, theta, state.spec, lr, cfg.local_epochs, cfg.batch_size, rng, offset, monitor)
    if kind == CLUSTER:
        return local_update_cluster(
            shard.train, theta, centroid, state.spec, lr, cfg.local_epochs, cfg.batch_size, rng,
            cfg.lam, state.n[client], state.n.sum(), offset, cfg.weight_cluster_gradient, monitor,
        )
    return local_update_personalized(shard.train, theta, state.spec, lr, cfg.local_epochs, cfg.batch_size, rng, offset, monitor)


def _distances(bank: LevelBank, row: np.ndarray, local: np.ndarray) -> np.ndarray:
    out = np.zeros(len(row))
    for i in np.flatnonzero(row != PRUNED):
        d = local[i] - bank.models[row[i]]
        out[i] = float(d @ d)
    return out


def _evaluate_round(state: _State, level: int, bank: LevelBank, row: np.ndarray):
    """Accuracy/F1 on test, validation loss and train loss with the newest level included."""
    cfg = state.config
    test_logits, test_labels, val_losses, train_losses = [], [], [], []
    for i, shard in enumerate(state.shards):
        theta = bank.models[row[i]] if row[i] != PRUNED else None
        def with_level(split):
            if theta is None:
                return state.prefix[split][i]
            return state.logits(split, level, i, theta)
        test_logits.append(with_level("test"))
        test_labels.append(shard.test.labels)
        val_losses.append(cross_entropy(with_level("validation"), shard.validation.labels))
        train_losses.append(cross_entropy(with_level("train"), shard.train.labels))
    res = evaluate(test_logits, test_labels, state.n, state.spec.num_classes)
    w = state.n / state.n.sum()
    return res, float(np.dot(w, val_losses)), float(np.dot(w, train_losses))


def _stage_done(level: int, t: int, acc_hist, cfg: EngineConfig) -> bool:
    floor = cfg.rounds_level1 if level == 0 else 0
    cap = floor + cfg.max_rounds_per_level
    if t >= cap:
        return True
    return t >= floor and check_level_converged(acc_hist, cfg.window, cfg.variance_threshold)


def _prune_and_adjust(state: _State, level: int, kind: str, bank: LevelBank, row: np.ndarray, record: RunRecord):
    """Per-client pruning, then re-aggregation over the clients that stay.

    Re-aggregating moves the shared model, so retained clients are checked
    again against the adjusted model until no client changes.
    """
    cfg = state.config
    row = row.copy()
    exempt = level == 0 and not cfg.prune_first_level
    while True:
        changed = False
        for i in np.flatnonzero(row != PRUNED):
            if exempt:
                break
            val = state.shards[i].validation
            new = forward(val.features, bank.models[row[i]], state.spec)
            prune, _, _ = should_prune(val.labels, state.prefix["validation"][i], new, cfg.prune_epsilon)
            if prune:
                row[i] = PRUNED
                changed = True
        if not changed:
            break
        if kind in (GLOBAL, CLUSTER):
            bank = aggregate(bank, row, state.local[level], state.n)
    return bank, row


def run_femam(shards: list[ClientShard], spec: PredictorSpec, config: EngineConfig) -> RunRecord:
    if not shards:
        raise ValueError("no clients")
    cfg = config
    n = np.array([s.n_i for s in shards], dtype=np.float64)
    state = _State(list(shards), spec, cfg, n)
    state.mapping = MappingTable(len(shards))
    state.prefix = {
        split: [np.zeros((len(getattr(s, split)), spec.num_classes)) for s in shards] for split in SPLITS
    }
    record = RunRecord("femam", cfg.as_dict())
    trace = Trace(keep_vectors=cfg.keep_trace_vectors) if cfg.record_trace else None
    record.trace = trace
    U = _grad_bound(shards, spec, cfg)
    record.grad_bound = U
    if cfg.clamp_lr_to_bound and not U > 0:
        raise ValueError("clamping to the learning-rate bound needs grad_bound for this predictor")
    num_levels = len(cfg.schedule)

    for level, kind in enumerate(cfg.schedule):
        record.level_add_rounds.append(len(record.rounds))
        bank, row, init_local = _init_level(state, level, kind)
        frozen = [b.models.copy() for b in state.banks]
        state.banks.append(bank)
        state.mapping.add_level(row)
        state.local[level] = init_local
        dist = _distances(bank, row, init_local) if kind == CLUSTER else np.zeros(state.m)
        acc_hist: list[float] = []
        t = 0
        while True:
            r = len(record.rounds)
            received = broadcast(bank, row)
            lrs, bounds = {}, {}
            for i in received:
                if kind == CLUSTER and U > 0:
                    bounds[i] = lr_bound_theorem1(dist[i], _local_steps(shards[i].n_i, cfg), U, num_levels)
                lrs[i] = min(cfg.lr, bounds[i]) if (cfg.clamp_lr_to_bound and i in bounds) else cfg.lr
            if trace is not None:
                grads = {}
                for i, theta in received.items():
                    off = state.prefix["train"][i]
                    grads[i] = trace.monitor(r, level, i, shards[i].train, spec, off).full_gradient(theta)
                trace.log_groups(r, level, row, grads, n)
            uploads, max_norm = {}, 0.0
            for i in sorted(received):
                gen = streams.stream(cfg.seed, streams.SHUFFLE, level, i, t)
                inner = trace.monitor(r, level, i, shards[i].train, spec, state.prefix["train"][i]) if trace else None
                mon = _Monitor(inner) if inner is not None else _NormOnly()
                uploads[i] = _train_client(state, level, kind, i, received[i], bank.models[row[i]], lrs[i], gen, mon)
                max_norm = max(max_norm, mon.max_norm)
            if kind == CLUSTER and t == 0 and cfg.centroid_seeding == "farthest":
                bank = farthest_first_seed(bank, uploads, n, streams.stream(cfg.seed, streams.MAPPING, level, 1))
            if kind == CLUSTER:
                row = assign_clusters(bank, uploads, row)
                bank, row = reseed_empty(bank, row, uploads)
            bank = aggregate(bank, row, uploads, n)
            local = state.local[level].copy()
            for i, theta in uploads.items():
                local[i] = theta
            state.local[level] = local
            state.banks[level] = bank
            state.mapping[level] = row
            F = em_objective_F(state.banks, state.mapping, {level: local}, n) if kind == CLUSTER else 0.0
            if kind == CLUSTER:
                dist = _distances(bank, row, local)
            res, val_loss, train_loss = _evaluate_round(state, level, bank, row)

            applied = min(lrs.values()) if lrs else math.nan
            bound = min(bounds.values()) if bounds else math.nan
            violated = any(lrs[i] > bounds[i] for i in bounds)
            record.rounds.append(
                RoundMetrics(
                    round=r, level=level, level_round=t, accuracy=res.overall_accuracy,
                    macro_f1=res.mean_macro_f1, val_loss=val_loss, F=F, R=train_loss,
                    grad_norm_max=max_norm, lr_applied=applied, lr_bound=bound, bound_violated=violated,
                    active=len(received), down=len(received), up=len(uploads),
                )
            )
            if cfg.keep_history:
                record.history.append(bank.models.copy())
            record.flag("finite_parameters", bool(np.all(np.isfinite(bank.models))), f"round {r}: non-finite parameters")
            record.flag(
                "frozen_levels_unchanged",
                all(np.array_equal(a, b.models) for a, b in zip(frozen, state.banks[:level])),
                f"round {r}: a frozen level changed",
            )
            record.flag(
                "one_model_each_way",
                len(received) == len(uploads) == int(np.sum(row != PRUNED)),
                f"round {r}: transfer count mismatch",
            )
            acc_hist.append(res.overall_accuracy)
            t += 1
            if _stage_done(level, t, acc_hist, cfg):
                break

        bank, row = _prune_and_adjust(state, level, kind, bank, row, record)
        state.banks[level] = bank
        state.mapping[level] = row
        for i in np.flatnonzero(row != PRUNED):
            for split in SPLITS:
                x = getattr(shards[i], split).features
                state.prefix[split][i] = state.prefix[split][i] + forward(x, bank.models[row[i]], spec)
        if level == 0:
            record.level1_val_loss = np.array(
                [cross_entropy(state.prefix["validation"][i], s.validation.labels) for i, s in enumerate(shards)]
            )
        log.info("level %d (%s) done after %d rounds, %d clients kept", level, kind, t, int(np.sum(row != PRUNED)))

    record.structure = state.mapping.matrix()
    record.final = evaluate(
        state.prefix["test"], [s.test.labels for s in shards], n, spec.num_classes
    )
    record.final_val_loss = np.array(
        [cross_entropy(state.prefix["validation"][i], s.validation.labels) for i, s in enumerate(shards)]
    )
    record.flag(
        "pruning_safety",
        bool(np.all(record.final_val_loss <= record.level1_val_loss + cfg.prune_epsilon * (num_levels - 1))),
        "a client's retained ensemble has a higher validation loss than level 1 alone",
    )
    record.flag("level_adds_increasing", bool(np.all(np.diff(record.level_add_rounds) > 0)), "level-add rounds not increasing")
    for level, bank in enumerate(state.banks):
        record.models[f"level{level}"] = bank.models
        if bank.kind != PERSONALIZED:
            record.models[f"local{level}"] = state.local[level]
    record.models["mapping"] = record.structure
    return record
