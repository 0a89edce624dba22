import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import assignment_brute_force
from toposeg.evaluation import confusion_matrix, hungarian_match, metrics


def test_identity_favouring_matrix():
    perm, cost = hungarian_match([[0, 1], [1, 0]])
    assert perm.tolist() == [0, 1] and cost == 0.0


def test_small_matrix():
    perm, cost = hungarian_match([[1, 2], [3, 1]])
    assert perm.tolist() == [0, 1] and cost == 2.0


def test_matches_brute_force_on_random_7x7():
    rng = np.random.default_rng(0)
    for _ in range(100):
        cost = rng.integers(0, 10, (7, 7)).astype(float)
        best, best_perm = assignment_brute_force(cost)
        perm, total = hungarian_match(cost)
        assert total == best
        assert tuple(perm.tolist()) == best_perm


def test_ties_break_lexicographically():
    perm, cost = hungarian_match(np.zeros((4, 4)))
    assert perm.tolist() == [0, 1, 2, 3] and cost == 0.0


def test_rectangular_is_padded():
    perm, cost = hungarian_match([[5, 1, 9]])
    assert perm[0] == 1 and cost == 1.0 and sorted(perm.tolist()) == [0, 1, 2]


@pytest.mark.parametrize("bad", [[[np.nan, 1.0], [1.0, 0.0]], [[np.inf, 1.0], [1.0, 0.0]], [1.0, 2.0]])
def test_bad_cost_rejected(bad):
    with pytest.raises(ValueError):
        hungarian_match(bad)


@settings(max_examples=50, deadline=None)
@given(cost=hnp.arrays(np.float64, st.integers(1, 6).map(lambda n: (n, n)), elements=st.floats(-50, 50)))
def test_never_worse_than_identity(cost):
    _, total = hungarian_match(cost)
    assert total <= np.trace(cost) + 1e-9


def test_perfect_prediction():
    truth = np.random.default_rng(0).integers(0, 4, (3, 8, 8))
    m = metrics(truth, truth, 4)
    assert m.acc == 1.0 and m.miou == 1.0


def test_permuted_prediction():
    truth = np.random.default_rng(1).integers(0, 4, (3, 8, 8))
    pred = np.array([2, 0, 3, 1])[truth]
    m = metrics(pred, truth, 4)
    assert m.acc == 1.0 and m.miou == 1.0
    assert m.mapping == [2, 0, 3, 1]


def test_two_by_two_toy():
    m = metrics(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]), 2)
    assert m.acc == pytest.approx(0.75)
    assert m.miou == pytest.approx((1 / 2 + 2 / 3) / 2)
    assert m.confusion.tolist() == [[1, 1], [0, 2]]


def test_absent_class_excluded_from_mean():
    m = metrics(np.array([0, 0, 1]), np.array([0, 0, 1]), 3)
    assert m.per_class_iou[2] is None and m.miou == 1.0


@settings(max_examples=40, deadline=None)
@given(
    data=hnp.arrays(np.int64, (2, 40), elements=st.integers(0, 3)),
    perm=st.permutations(range(4)),
)
def test_permutation_invariance_and_bounds(data, perm):
    pred, truth = data
    a = metrics(pred, truth, 4)
    b = metrics(np.array(perm)[pred], truth, 4)
    assert a.acc == pytest.approx(b.acc, abs=1e-12) and a.miou == pytest.approx(b.miou, abs=1e-12)
    assert 0 <= a.acc <= 1 and 0 <= a.miou <= 1


def test_invalid_labels_rejected():
    with pytest.raises(ValueError):
        metrics(np.array([0, 5]), np.array([0, 1]), 4)
    with pytest.raises(ValueError):
        metrics(np.array([0, 1]), np.array([0, 1, 1]), 4)
    with pytest.raises(ValueError):
        confusion_matrix(np.array([-1]), np.array([0]), 2, 2)


@settings(max_examples=60, deadline=None)
@given(
    conf=hnp.arrays(np.int64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.integers(0, 3)),
    seed=st.integers(0, 2**16),
)
def test_confusion_scoring_is_relabelling_invariant(conf, seed):
    from toposeg.evaluation import metrics_from_confusion

    if conf.sum() == 0:
        conf[0, 0] = 1
    shuffled = conf[np.random.default_rng(seed).permutation(conf.shape[0])]
    a, b = metrics_from_confusion(conf), metrics_from_confusion(shuffled)
    n = max(conf.shape)
    sq = np.zeros((n, n))
    sq[: conf.shape[0], : conf.shape[1]] = conf
    best, _ = assignment_brute_force(-sq)
    assert a.acc == pytest.approx(-best / conf.sum(), abs=1e-12)
    assert a.acc == pytest.approx(b.acc, abs=1e-12)
    assert a.miou == pytest.approx(b.miou, abs=1e-12)
