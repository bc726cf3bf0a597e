import pytest

from femam.datagen import (
    CLUSTER_WISE,
    IID,
    MULTI_LEVEL,
    DatasetSpec,
    PartitionSpec,
    generate_dataset,
    make_shards,
    partition,
)
from femam.model import LINEAR, PredictorSpec


def build(kind, seed=0, num_clients=8, num_classes=8, noise=1.0, **pkw):
    table = generate_dataset(DatasetSpec(num_classes, 60, 4, noise, seed=seed))
    part = partition(table, PartitionSpec(kind, num_clients, **pkw), seed)
    return make_shards(table, part, 0.2, 0.2, seed), part, PredictorSpec(LINEAR, 4, num_classes)


@pytest.fixture
def iid_small():
    return build(IID)


@pytest.fixture
def clustered_small():
    return build(CLUSTER_WISE, classes_per_cluster=4, num_clusters=2, noise=0.3)


@pytest.fixture
def multi_small():
    return build(MULTI_LEVEL, levels=((2, 1), (3, 2)), level_weights=(0.25, 0.75))


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    _ACCEPTANCE[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
