import numpy as np
import pytest

from femam.baselines import (
    BaselineConfig,
    finetune_plus,
    run_baseline,
    run_fedavg,
    run_fesem,
    run_local,
)
from femam.engine import EngineConfig, run_femam
from femam.metrics import adjusted_rand_index
from femam.model import cross_entropy, forward

from conftest import build


def cfg(**kw):
    base = dict(rounds=8, lr=0.3, local_epochs=2, batch_size=32, seed=1)
    base.update(kw)
    return BaselineConfig(**base)


def test_fedavg_replays_femam_single_level(iid_small):
    shards, _, spec = iid_small
    fed = run_fedavg(shards, spec, cfg(rounds=12))
    eng = EngineConfig(
        max_levels=1, lr=0.3, local_epochs=2, batch_size=32, seed=1, rounds_level1=12,
        max_rounds_per_level=1, window=1000, keep_history=True, record_trace=False,
    )
    fem = run_femam(shards, spec, eng)
    assert len(fem.history) >= 12
    for a, b in zip(fed.history, fem.history[:12]):
        assert np.array_equal(a, b)


def test_fesem_single_cluster_replays_fedavg(iid_small):
    shards, _, spec = iid_small
    fed = run_fedavg(shards, spec, cfg())
    sem = run_fesem(shards, spec, cfg(algorithm="fesem", clusters=1, lam=0.0, weight_cluster_gradient=False))
    for a, b in zip(fed.history, sem.history):
        assert np.array_equal(a, b)


def test_one_client_fedavg_equals_local(iid_small):
    shards, _, spec = iid_small
    one = shards[:1]
    fed = run_fedavg(one, spec, cfg())
    loc = run_local(one, spec, cfg(algorithm="local"))
    assert np.array_equal(fed.client_models[0], loc.client_models[0])


def test_zero_learning_rate_keeps_the_model(iid_small):
    shards, _, spec = iid_small
    rec = run_fedavg(shards, spec, cfg(lr=0.0))
    assert all(np.allclose(h, rec.history[0], atol=1e-12) for h in rec.history)


def test_local_sends_nothing(iid_small):
    shards, _, spec = iid_small
    rec = run_local(shards, spec, cfg(algorithm="local"))
    assert all(r.down == r.up == 0 for r in rec.rounds)


def test_fedavg_transfers_two_per_client(iid_small):
    shards, _, spec = iid_small
    rec = run_fedavg(shards, spec, cfg())
    assert all(r.down == r.up == len(shards) for r in rec.rounds)


def test_local_below_fedavg_on_iid():
    shards, _, spec = build("iid", num_clients=10, noise=1.5)
    budget = cfg(rounds=30, lr=0.5)
    fed = run_fedavg(shards, spec, budget)
    loc = run_local(shards, spec, BaselineConfig(**{**budget.as_dict(), "algorithm": "local"}))
    assert loc.final.overall_accuracy < fed.final.overall_accuracy


def test_fesem_recovers_clean_clusters(clustered_small):
    shards, part, spec = clustered_small
    rec = run_fesem(shards, spec, cfg(algorithm="fesem", clusters=2, rounds=10, centroid_seeding="farthest"))
    assert adjusted_rand_index(rec.structure[0], part.ground_truth.levels[0]) >= 0.9


def test_fesem_one_cluster_per_client_isolates_clients(iid_small):
    shards, _, spec = iid_small
    rec = run_fesem(
        shards, spec, cfg(algorithm="fesem", clusters=len(shards), lam=0.0, centroid_seeding="farthest")
    )
    assert sorted(rec.structure[0]) == list(range(len(shards)))


def test_finetune_zero_epochs_is_identity(iid_small):
    shards, _, spec = iid_small
    base = run_fedavg(shards, spec, cfg())
    plus = finetune_plus(base, shards, spec, epochs=0)
    assert all(np.array_equal(a, b) for a, b in zip(base.client_models, plus.client_models))
    assert plus.final.overall_accuracy == base.final.overall_accuracy
    assert plus.algorithm == "fedavg+"


def test_finetune_zero_lr_is_identity(iid_small):
    shards, _, spec = iid_small
    base = run_fedavg(shards, spec, cfg())
    plus = finetune_plus(base, shards, spec, epochs=2, lr=0.0)
    assert all(np.array_equal(a, b) for a, b in zip(base.client_models, plus.client_models))


def test_finetune_small_lr_does_not_raise_train_loss(iid_small):
    shards, _, spec = iid_small
    base = run_fedavg(shards, spec, cfg())
    plus = finetune_plus(base, shards, spec, epochs=2, lr=1e-4)
    for s, a, b in zip(shards, base.client_models, plus.client_models):
        before = cross_entropy(forward(s.train.features, a, spec), s.train.labels)
        after = cross_entropy(forward(s.train.features, b, spec), s.train.labels)
        assert after <= before


@pytest.mark.parametrize("algo", ["local", "fedavg", "fedavg+", "fesem", "fesem+"])
def test_dispatch(iid_small, algo):
    shards, _, spec = iid_small
    rec = run_baseline(shards, spec, cfg(algorithm=algo, clusters=2, rounds=3))
    assert rec.algorithm == algo
    assert len(rec.client_models) == len(shards)
    assert rec.ok


def test_unknown_algorithm():
    with pytest.raises(ValueError):
        BaselineConfig(algorithm="fedprox")
