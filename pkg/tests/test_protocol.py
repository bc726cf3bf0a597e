import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from femam.diagnostics import lr_bound_theorem1, lr_bound_theorem2
from femam.model import Batch, PredictorSpec, cross_entropy, init_params, loss_and_grad, predict_additive
from femam.protocol import (
    CLUSTER,
    GLOBAL,
    PERSONALIZED,
    PRUNED,
    LevelBank,
    MappingTable,
    aggregate,
    assign_clusters,
    broadcast,
    em_objective_F,
    fl_objective_R,
    global_row,
    group_weights,
    local_update_cluster,
    local_update_global,
    local_update_personalized,
    personalized_row,
    reseed_empty,
)

SPEC = PredictorSpec("linear-softmax", input_dim=3, num_classes=4)


def batch(rng, n=20):
    return Batch(rng.normal(size=(n, 3)), rng.integers(0, 4, size=n))


def brute_F(banks, rows, local, n):
    total = sum(n)
    value = 0.0
    for level, bank in enumerate(banks):
        if bank.kind != CLUSTER:
            continue
        for i in range(len(n)):
            k = rows[level][i]
            if k == PRUNED:
                continue
            value += n[i] / total * sum((a - b) ** 2 for a, b in zip(local[level][i], bank.models[k]))
    return value


# -- broadcast / aggregate ------------------------------------------------------


def test_broadcast_single_model_and_identity():
    bank = LevelBank(0, GLOBAL, np.arange(5.0)[None])
    got = broadcast(bank, global_row(4))
    assert all(np.array_equal(v, bank.models[0]) for v in got.values())
    got[0][0] = 99.0
    assert bank.models[0, 0] == 0.0
    pbank = LevelBank(4, PERSONALIZED, np.arange(12.0).reshape(4, 3))
    got = broadcast(pbank, personalized_row(4))
    assert all(np.array_equal(got[i], pbank.models[i]) for i in range(4))


def test_broadcast_is_exact_and_skips_pruned():
    rng = np.random.default_rng(0)
    bank = LevelBank(1, CLUSTER, rng.normal(size=(3, 6)))
    row = np.array([2, 0, PRUNED, 1, 2])
    got = broadcast(bank, row)
    assert set(got) == {0, 1, 3, 4}
    for i, k in enumerate(row):
        if k != PRUNED:
            assert got[i].tobytes() == bank.models[k].tobytes()


def test_aggregate_weighted_mean_scalar():
    bank = LevelBank(0, GLOBAL, [[0.0]])
    out = aggregate(bank, global_row(2), {0: np.array([0.0]), 1: np.array([4.0])}, [1, 3])
    assert out.models[0, 0] == 3.0


def test_aggregate_constants_and_errors():
    bank = LevelBank(0, GLOBAL, [[1.5, -2.0]])
    same = {i: np.array([1.5, -2.0]) for i in range(3)}
    assert np.array_equal(aggregate(bank, global_row(3), same, [5, 1, 2]).models, bank.models)
    with pytest.raises(ValueError):
        aggregate(bank, global_row(3), same, [1, -1, 2])


def test_aggregate_matches_direct_weighted_average():
    rng = np.random.default_rng(1)
    for _ in range(20):
        m, k, d = 12, 3, 7
        bank = LevelBank(1, CLUSTER, rng.normal(size=(k, d)))
        row = rng.integers(0, k, size=m)
        row[rng.random(m) < 0.2] = PRUNED
        local = rng.normal(size=(m, d))
        n = rng.integers(1, 100, size=m)
        out = aggregate(bank, row, local, n)
        for j in range(k):
            members = np.flatnonzero(row == j)
            if len(members) == 0:
                assert np.array_equal(out.models[j], bank.models[j])
                continue
            expected = (n[members, None] * local[members]).sum(axis=0) / n[members].sum()
            np.testing.assert_allclose(out.models[j], expected, rtol=1e-12, atol=1e-12)
            _, w = group_weights(row, n, j)
            assert abs(w.sum() - 1.0) <= 1e-12


def test_round_trip_without_training_is_identity():
    rng = np.random.default_rng(2)
    bank = LevelBank(1, CLUSTER, rng.normal(size=(3, 4)))
    row = np.array([0, 1, 2, 0, 1, PRUNED])
    back = aggregate(bank, row, broadcast(bank, row), rng.integers(1, 9, size=6))
    np.testing.assert_allclose(back.models, bank.models, rtol=1e-15, atol=0)


# -- assignment -----------------------------------------------------------------


def test_nearest_center_and_tie_break():
    bank = LevelBank(1, CLUSTER, [[1.0], [3.0]])
    assert assign_clusters(bank, {0: np.array([0.9])}, np.array([1]))[0] == 0
    assert assign_clusters(bank, {0: np.array([2.0])}, np.array([1]))[0] == 0
    assert assign_clusters(bank, {0: np.array([2.9])}, np.array([PRUNED]))[0] == PRUNED
    with pytest.raises(ValueError):
        assign_clusters(LevelBank(0, GLOBAL, [[0.0]]), {0: np.array([1.0])}, np.array([0]))


def test_assignment_matches_exhaustive_argmin():
    rng = np.random.default_rng(3)
    bank = LevelBank(1, CLUSTER, rng.normal(size=(4, 5)))
    local = rng.normal(size=(20, 5))
    row = assign_clusters(bank, local, np.zeros(20, dtype=int))
    for i in range(20):
        dists = [sum((local[i][j] - bank.models[k][j]) ** 2 for j in range(5)) for k in range(4)]
        assert row[i] == min(range(4), key=lambda k: (dists[k], k))


def test_empty_cluster_waits_one_round_then_reseeds():
    bank = LevelBank(1, CLUSTER, [[0.0], [1.0], [50.0]])
    local = {0: np.array([0.1]), 1: np.array([0.2]), 2: np.array([1.0]), 3: np.array([3.0])}
    row = np.array([0, 0, 1, 1])
    bank, row = reseed_empty(bank, row, local)
    assert bank.models[2, 0] == 50.0 and bank.stale[2] == 1
    bank, new_row = reseed_empty(bank, row, local)
    # farthest client from its centroid among clusters with >= 2 members is client 3
    assert new_row.tolist() == [0, 0, 1, 2]
    assert bank.models[2, 0] == 3.0 and bank.stale[2] == 0


# -- F and R ----------------------------------------------------------------------


def test_F_trivial_cases():
    bank = LevelBank(1, CLUSTER, [[1.0, 1.0]])
    mapping = MappingTable(1)
    mapping.add_level([0])
    mapping.add_level([0])
    g = LevelBank(0, GLOBAL, [[5.0, 5.0]])
    assert em_objective_F([g, bank], mapping, {1: {0: np.array([1.0, 1.0])}}, [3]) == 0.0
    assert em_objective_F([g, bank], mapping, {1: {0: np.array([1.0, 3.0])}}, [3]) == 4.0


def random_instance(rng, m=7, levels=(GLOBAL, CLUSTER, CLUSTER), k=3, d=4):
    banks, local, rows = [], {}, []
    mapping = MappingTable(m)
    for level, kind in enumerate(levels):
        size = 1 if kind == GLOBAL else k
        banks.append(LevelBank(level, kind, rng.normal(size=(size, d))))
        row = rng.integers(0, size, size=m)
        row[rng.random(m) < 0.15] = PRUNED
        mapping.add_level(row)
        rows.append(row)
        local[level] = rng.normal(size=(m, d))
    n = rng.integers(1, 50, size=m)
    return banks, mapping, rows, local, n


def test_F_matches_double_loop():
    rng = np.random.default_rng(4)
    for _ in range(10):
        banks, mapping, rows, local, n = random_instance(rng)
        assert em_objective_F(banks, mapping, local, n) == pytest.approx(brute_F(banks, rows, local, n), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_assign_and_aggregate_never_increase_F(seed):
    rng = np.random.default_rng(seed)
    banks, mapping, rows, local, n = random_instance(rng, levels=(CLUSTER,))
    before = brute_F(banks, rows, local, n)
    row = assign_clusters(banks[0], local[0], mapping[0])
    after_assign = brute_F(banks, [row], local, n)
    bank = aggregate(banks[0], row, local[0], n)
    after_agg = brute_F([bank], [row], local, n)
    assert after_assign <= before + 1e-12
    assert after_agg <= after_assign + 1e-12


def test_R_trivial_and_loop():
    rng = np.random.default_rng(5)
    batches = [batch(rng, 10), batch(rng, 30)]
    zero = [LevelBank(0, GLOBAL, np.zeros((1, SPEC.dim)))]
    mapping = MappingTable(2)
    mapping.add_level(global_row(2))
    assert fl_objective_R(batches, zero, mapping, SPEC) == pytest.approx(math.log(4), rel=1e-12)
    assert fl_objective_R(batches[:1], zero, _one(mapping), SPEC) == pytest.approx(math.log(4))

    banks, mapping, rows, local, n = random_instance(rng, m=2, d=SPEC.dim)
    expected = 0.0
    total = 40
    for i, b in enumerate(batches):
        models = [banks[l].models[rows[l][i]] for l in range(3) if rows[l][i] != PRUNED]
        expected += len(b) / total * cross_entropy(predict_additive(b, models, SPEC), b.labels)
    assert fl_objective_R(batches, banks, mapping, SPEC) == pytest.approx(expected, rel=1e-12)


def _one(mapping):
    out = MappingTable(1)
    out.add_level(mapping[0][:1])
    return out


# -- local updates --------------------------------------------------------------


def test_zero_lr_leaves_parameters():
    rng = np.random.default_rng(6)
    b, theta = batch(rng), init_params(SPEC, rng)
    assert np.array_equal(local_update_global(b, theta, SPEC, 0.0, 2, 8, np.random.default_rng(0)), theta)
    assert np.array_equal(local_update_personalized(b, theta, SPEC, 0.0, 2, 8, np.random.default_rng(0)), theta)


def test_single_full_batch_step_is_verified_gradient_step():
    rng = np.random.default_rng(7)
    b, theta = batch(rng), init_params(SPEC, rng)
    offset = rng.normal(size=(len(b), 4))
    got = local_update_global(b, theta, SPEC, 0.3, 1, len(b), np.random.default_rng(0), offset=offset)

    def f(t):
        return cross_entropy(offset + predict_additive(b, [t], SPEC), b.labels)

    grad = np.array([(f(theta + e * 1e-6) - f(theta - e * 1e-6)) / 2e-6 for e in np.eye(SPEC.dim)])
    np.testing.assert_allclose(got, theta - 0.3 * grad, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("update", [local_update_global, local_update_personalized])
def test_small_step_decreases_loss(update):
    rng = np.random.default_rng(8)
    b, theta = batch(rng, 50), init_params(SPEC, rng, scale=3.0)
    before, _ = loss_and_grad(b, [theta], SPEC, 0)
    after, _ = loss_and_grad(b, [update(b, theta, SPEC, 1e-4, 1, 50, np.random.default_rng(0))], SPEC, 0)
    assert after <= before


def test_pure_proximal_step_moves_toward_centroid():
    # saturated model on separable data: gradient underflows to 0
    spec = PredictorSpec("linear-softmax", 2, 2)
    b = Batch(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1])
    theta = np.array([800.0, -800.0, -800.0, 800.0, 0.0, 0.0])
    centroid = theta + 10.0
    _, g = loss_and_grad(b, [theta], spec, 0)
    assert not g.any()
    got = local_update_cluster(b, theta, centroid, spec, 0.5, 1, 2, np.random.default_rng(0), lam=0.2, n_i=1, n=4)
    np.testing.assert_allclose(got, theta + 0.1 * (centroid - theta))


def test_zero_lambda_full_weight_is_global_step_bitwise():
    rng = np.random.default_rng(9)
    b, theta, centroid = batch(rng, 33), init_params(SPEC, rng), init_params(SPEC, rng)
    a = local_update_global(b, theta, SPEC, 0.05, 3, 8, np.random.default_rng(1))
    c = local_update_cluster(b, theta, centroid, SPEC, 0.05, 3, 8, np.random.default_rng(1), lam=0.0, n_i=33, n=33)
    assert np.array_equal(a, c)
    d = local_update_cluster(
        b, theta, centroid, SPEC, 0.05, 3, 8, np.random.default_rng(1), lam=0.0, n_i=3, n=33, weight_gradient=False
    )
    assert np.array_equal(a, d)


def test_zero_lambda_scales_gradient_by_share():
    rng = np.random.default_rng(10)
    b, theta = batch(rng, 16), init_params(SPEC, rng)
    a = local_update_global(b, theta, SPEC, 0.25 * 0.2, 1, 16, np.random.default_rng(1))
    c = local_update_cluster(b, theta, theta, SPEC, 0.2, 1, 16, np.random.default_rng(1), lam=0.0, n_i=1, n=4)
    np.testing.assert_allclose(a, c, rtol=1e-14)


def test_cluster_step_is_gradient_step_on_penalized_objective():
    rng = np.random.default_rng(11)
    b = batch(rng, 12)
    theta, centroid = init_params(SPEC, rng), init_params(SPEC, rng)
    lam, lr, n_i, n = 0.3, 0.1, 12, 60
    got = local_update_cluster(b, theta, centroid, SPEC, lr, 1, 12, np.random.default_rng(0), lam, n_i, n)

    def penalized(t):
        data = cross_entropy(predict_additive(b, [t], SPEC), b.labels)
        return data + lam / 2 * (n / n_i) * np.sum((t - centroid) ** 2)

    grad = np.array([(penalized(theta + e * 1e-6) - penalized(theta - e * 1e-6)) / 2e-6 for e in np.eye(SPEC.dim)])
    np.testing.assert_allclose(got, theta - lr * (n_i / n) * grad, rtol=1e-7, atol=1e-9)


def test_proximal_overshoot_warns():
    rng = np.random.default_rng(12)
    b, theta = batch(rng), init_params(SPEC, rng)
    with pytest.warns(UserWarning, match="overshoots"):
        local_update_cluster(b, theta, theta, SPEC, 1.0, 1, 8, np.random.default_rng(0), lam=1.5, n_i=1, n=1)


def test_empty_train_set_rejected():
    from femam.model import EmptyBatchError

    empty = Batch(np.zeros((0, 3)), np.zeros(0, dtype=int))
    with pytest.raises(EmptyBatchError):
        local_update_global(empty, np.zeros(SPEC.dim), SPEC, 0.1, 1, 4, np.random.default_rng(0))


# -- learning-rate bounds -----------------------------------------------------------


def test_theorem1_bound_values():
    assert lr_bound_theorem1(5.0, 2, 10.0, 5) == pytest.approx(0.05, rel=1e-15)
    assert lr_bound_theorem1([1.0, 4.0], 2, 10.0, 5) == pytest.approx(0.05, rel=1e-15)
    assert lr_bound_theorem1(0.0, 3, 1.0, 5) == 0.0
    assert lr_bound_theorem1(7.0, 2, 20.0, 5) == pytest.approx(lr_bound_theorem1(7.0, 2, 10.0, 5) / 2, rel=1e-15)


def test_theorem2_bound_values():
    t1 = 1e9
    assert lr_bound_theorem2(3.0, 0.0, 5.0, 0.0, 4.0, t1) == pytest.approx(0.5)
    assert lr_bound_theorem2(8.0, 2.0, 2.0, 1.0, 3.0, t1) == 0.0
    assert lr_bound_theorem2(1.0, 2.0, 2.0, 1.0, 3.0, t1) < 0
    assert lr_bound_theorem2(3.0, 0.0, 5.0, 0.0, 4.0, 0.1) == 0.1
