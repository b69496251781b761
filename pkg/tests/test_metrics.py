import itertools

import numpy as np
import pytest

from tarnet.errors import UsageError
from tarnet.metrics import EvalReport, approx_randomization, ranked, topk_accuracy, weighted_prf


def exhaustive_p(a, b):
    """Exact two-sided p over all 2^n swap patterns."""
    d = np.asarray(a, float) - np.asarray(b, float)
    observed = abs(d.mean())
    signs = np.array(list(itertools.product([1.0, -1.0], repeat=len(d))))
    return float(np.mean(np.abs(signs @ d) / len(d) >= observed - 1e-12))


def test_perfect_predictions():
    scores = np.eye(4) + 0.1
    assert topk_accuracy(scores, [0, 1, 2, 3], 1) == 1.0
    assert topk_accuracy(scores, [0, 1, 2, 3], 5) == 1.0


def test_k_larger_than_classes_is_clamped():
    scores = np.random.default_rng(0).normal(size=(6, 3))
    assert topk_accuracy(scores, [0, 1, 2, 0, 1, 2], 5) == 1.0


def test_top2_hand_example():
    scores = np.array([
        [0.9, 0.5, 0.1],  # label 1 second -> hit
        [0.2, 0.3, 0.8],  # label 0 last -> miss
        [0.1, 0.7, 0.6],  # label 2 second -> hit
        [0.4, 0.1, 0.3],  # label 0 first -> hit
    ])
    assert topk_accuracy(scores, [1, 0, 2, 0], 2) == 0.75


def test_ties_go_to_lower_index():
    assert ranked([[1.0, 1.0, 0.5]]).tolist() == [[0, 1, 2]]
    assert topk_accuracy([[1.0, 1.0]], [1], 1) == 0.0


def test_topk_is_monotone_in_k():
    rng = np.random.default_rng(1)
    for _ in range(20):
        scores = rng.normal(size=(30, 8))
        labels = rng.integers(0, 8, size=30)
        accs = [topk_accuracy(scores, labels, k) for k in range(1, 9)]
        assert all(x <= y for x, y in zip(accs, accs[1:]))
        assert accs[-1] == 1.0


def test_topk_errors():
    with pytest.raises(UsageError):
        topk_accuracy(np.ones((2, 3)), [0, 1], 0)
    with pytest.raises(UsageError):
        topk_accuracy(np.ones((2, 3)), [0], 1)


def test_prf_perfect():
    assert weighted_prf([0, 1, 2, 2], [0, 1, 2, 2]) == (1.0, 1.0, 1.0)


def test_prf_hand_example():
    p, r, f = weighted_prf([0, 0, 1, 1], [0, 1, 1, 1])
    assert p == pytest.approx(5 / 6)
    assert r == pytest.approx(3 / 4)
    assert f == pytest.approx(11 / 15)


def test_unpredicted_class_has_zero_precision():
    p, r, f = weighted_prf([0, 1], [0, 0])
    assert p == pytest.approx(0.5 * 0.5 + 0.5 * 0.0)
    assert r == 0.5


def test_weighted_recall_equals_accuracy():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        true, pred = rng.integers(0, 5, size=n), rng.integers(0, 5, size=n)
        assert weighted_prf(true, pred)[1] == pytest.approx(np.mean(true == pred), abs=1e-12)


def test_prf_errors():
    with pytest.raises(UsageError):
        weighted_prf([], [])
    with pytest.raises(UsageError):
        weighted_prf([0, 1], [0])


def test_ar_identical_inputs():
    a = np.array([1, 0, 1, 1, 0], float)
    res = approx_randomization(a, a, n_perm=500, seed=3)
    assert res.observed == 0.0
    assert res.p_value == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_ar_matches_exhaustive_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 13))
    a, b = rng.integers(0, 2, size=n), rng.integers(0, 2, size=n)
    res = approx_randomization(a, b, n_perm=10000, seed=seed)
    assert abs(res.p_value - exhaustive_p(a, b)) <= 0.02


def test_ar_deterministic_and_in_range():
    rng = np.random.default_rng(4)
    a, b = rng.integers(0, 2, size=40), rng.integers(0, 2, size=40)
    r1 = approx_randomization(a, b, n_perm=3000, seed=9, chunk=700)
    r2 = approx_randomization(a, b, n_perm=3000, seed=9, chunk=700)
    assert r1 == r2
    assert 0 < r1.p_value <= 1


def test_ar_clearly_different_systems():
    a = np.ones(60)
    b = np.zeros(60)
    res = approx_randomization(a, b, n_perm=2000, seed=0)
    assert res.p_value == pytest.approx(1 / 2001)


def test_ar_length_mismatch():
    with pytest.raises(UsageError):
        approx_randomization([1, 0], [1], n_perm=10)


def test_eval_report():
    scores = np.array([[0.9, 0.1, 0.0], [0.2, 0.7, 0.1], [0.5, 0.1, 0.4]])
    rep = EvalReport.from_scores(scores, [0, 1, 2])
    assert rep.top1 == pytest.approx(2 / 3)
    assert rep.top5 == 1.0
    assert rep.predictions.tolist() == [0, 1, 0]
    assert rep.correct(1).tolist() == [1.0, 1.0, 0.0]
    assert rep.recall == pytest.approx(rep.top1)
    assert set(rep.as_row()) == {"top1", "top5", "precision", "recall", "f1"}
    assert "top1" in rep.table()
