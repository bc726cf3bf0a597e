"""Named synthetic scenarios used by the scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from femam.baselines import ALGORITHMS, BaselineConfig, run_baseline
from femam.datagen import (
    CLUSTER_WISE,
    DIRICHLET,
    IID,
    MULTI_LEVEL,
    DatasetSpec,
    Partition,
    PartitionSpec,
    generate_dataset,
    make_shards,
    partition,
)
from femam.engine import EngineConfig, run_femam
from femam.model import LINEAR, PredictorSpec
from femam.records import RunRecord


@dataclass(frozen=True)
class Scenario:
    name: str
    dataset: DatasetSpec
    partition: PartitionSpec
    engine: EngineConfig
    baseline_rounds: int
    val_fraction: float = 0.3
    test_fraction: float = 0.15
    predictor: str = LINEAR
    hidden_dim: int = 0

    @property
    def spec(self) -> PredictorSpec:
        d = self.dataset
        return PredictorSpec(self.predictor, d.input_dim, d.num_classes, self.hidden_dim)

    def shards(self, seed: int):
        table = generate_dataset(replace(self.dataset, seed=seed))
        part = partition(table, self.partition, seed)
        return make_shards(table, part, self.val_fraction, self.test_fraction, seed), part

    def engine_config(self, seed: int, **overrides) -> EngineConfig:
        return replace(self.engine, seed=seed, **overrides)

    def baseline_config(self, algorithm: str, seed: int) -> BaselineConfig:
        e = self.engine
        return BaselineConfig(
            algorithm=algorithm, rounds=self.baseline_rounds, lr=e.lr, local_epochs=e.local_epochs,
            batch_size=e.batch_size, clusters=e.clusters_per_level, lam=e.lam,
            weight_cluster_gradient=e.weight_cluster_gradient, centroid_seeding=e.centroid_seeding,
            centroid_init_scale=e.centroid_init_scale, seed=seed,
        )


BASELINE_ROUNDS = 300


def _engine(**kw) -> EngineConfig:
    # the global level gets the same round floor as the baselines' whole run
    base = dict(
        max_levels=5, clusters_per_level=5, lr=0.5, local_epochs=2, rounds_level1=BASELINE_ROUNDS,
        max_rounds_per_level=100,
        window=50, variance_threshold=1.0, lam=0.1, batch_size=64, weight_cluster_gradient=False,
        centroid_seeding="farthest", record_trace=False,
    )
    base.update(kw)
    return EngineConfig(**base)


def _data(num_classes: int, **kw) -> DatasetSpec:
    base = dict(num_classes=num_classes, samples_per_class=200, input_dim=10, noise_std=1.5)
    base.update(kw)
    return DatasetSpec(**base)


SCENARIOS: dict[str, Scenario] = {
    # one global tier plus five class-disjoint clusters
    "two-level": Scenario(
        "two-level",
        _data(20),
        PartitionSpec(MULTI_LEVEL, 20, levels=((5, 1), (3, 5)), level_weights=(0.25, 0.75)),
        _engine(),
        baseline_rounds=BASELINE_ROUNDS,
    ),
    "iid": Scenario("iid", _data(20), PartitionSpec(IID, 20), _engine(), baseline_rounds=BASELINE_ROUNDS),
    "cluster-wise": Scenario(
        "cluster-wise", _data(20), PartitionSpec(CLUSTER_WISE, 20, classes_per_cluster=4, num_clusters=5),
        _engine(), baseline_rounds=BASELINE_ROUNDS,
    ),
    "dirichlet": Scenario(
        "dirichlet", _data(20), PartitionSpec(DIRICHLET, 20, alpha=0.1), _engine(), baseline_rounds=BASELINE_ROUNDS,
    ),
    # five nested tiers: global, 2, 5 and 10 client groups, then classes private to one client
    "multi-level": Scenario(
        "multi-level",
        _data(48, input_dim=20, noise_std=1.0),
        PartitionSpec(
            MULTI_LEVEL, 20, levels=((4, 1), (2, 2), (2, 5), (1, 10), (1, 20)),
            level_weights=(4 / 48, 4 / 48, 10 / 48, 10 / 48, 20 / 48),
        ),
        _engine(),
        baseline_rounds=BASELINE_ROUNDS,
    ),
}


def run_algorithm(scenario: Scenario, algorithm: str, seed: int, shards=None, **engine_overrides) -> RunRecord:
    if shards is None:
        shards, _ = scenario.shards(seed)
    if algorithm == "femam":
        return run_femam(shards, scenario.spec, scenario.engine_config(seed, **engine_overrides))
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    return run_baseline(shards, scenario.spec, scenario.baseline_config(algorithm, seed))
