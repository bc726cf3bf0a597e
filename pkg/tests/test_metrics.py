import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import adjusted_rand_score

from femam.metrics import accuracy, adjusted_rand_index, evaluate, macro_f1


def test_accuracy_cases():
    y = np.arange(10) % 3
    assert accuracy(y, y) == 100.0
    assert accuracy((y + 1) % 3, y) == 0.0
    pred = y.copy()
    pred[:3] = (pred[:3] + 1) % 3
    assert accuracy(pred, y) == pytest.approx(70.0)


def test_macro_f1_cases():
    y = np.array([0, 1, 2, 2])
    assert macro_f1(y, y, 5) == 1.0
    # TP=1, FP=1, FN=1 for both classes: F1 = 2/(2+1+1) = 0.5 each
    assert macro_f1(np.array([0, 1, 1, 0]), np.array([0, 0, 1, 1]), 2) == pytest.approx(0.5)
    assert macro_f1(np.array([3, 3]), np.array([3, 3]), 4) == 1.0
    # class 1 in labels but never predicted contributes 0
    assert macro_f1(np.array([0, 0]), np.array([0, 1]), 3) == pytest.approx((2 / 3 + 0) / 2)


def test_overall_accuracy_is_weighted_by_counts():
    rng = np.random.default_rng(0)
    logits = [rng.normal(size=(n, 4)) for n in (5, 9, 13)]
    labels = [rng.integers(0, 4, size=len(z)) for z in logits]
    res = evaluate(logits, labels, [10, 30, 60], 4)
    assert res.overall_accuracy == pytest.approx(np.dot([10, 30, 60], res.accuracy) / 100, abs=1e-9)
    assert np.all((0 <= res.accuracy) & (res.accuracy <= 100))
    assert np.all((0 <= res.macro_f1) & (res.macro_f1 <= 1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=40), st.randoms())
def test_metrics_ignore_sample_order(pairs, rnd):
    pred, lab = map(np.array, zip(*pairs))
    perm = list(range(len(pred)))
    rnd.shuffle(perm)
    assert accuracy(pred[perm], lab[perm]) == accuracy(pred, lab)
    assert macro_f1(pred[perm], lab[perm], 5) == pytest.approx(macro_f1(pred, lab, 5), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 3)), min_size=2, max_size=50))
def test_ari_matches_sklearn(pairs):
    a, b = zip(*pairs)
    assert adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)


def test_ari_relabeling_invariant():
    assert adjusted_rand_index([0, 0, 1, 1, 2], [5, 5, 3, 3, 9]) == 1.0
