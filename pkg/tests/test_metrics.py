import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from dlfumi.metrics import auc_score, average_runs, multiclass_accuracy, roc, tpr_at_fpr

from oracles import mann_whitney_auc


def test_roc_hand_computed():
    # scores 0.9(+) 0.8(-) 0.7(+) 0.7(-) 0.1(-)
    c = roc([0.9, 0.8, 0.7, 0.7, 0.1], [1, 0, 1, 0, 0])
    assert c.fpr.tolist() == pytest.approx([0, 0, 1 / 3, 2 / 3, 1])
    assert c.tpr.tolist() == pytest.approx([0, 0.5, 0.5, 1, 1])
    assert c.thresholds.tolist() == [0.9, 0.8, 0.7, 0.1]
    # pairs: 0.9 beats all 3, 0.7 beats 0.1 and ties 0.7 -> (3 + 1 + 0.5) / 6
    assert c.auc == pytest.approx(4.5 / 6)


def test_roc_extremes():
    assert auc_score([3, 2, 1, 0], [1, 1, 0, 0]) == 1.0
    assert auc_score([0, 1, 2, 3], [1, 1, 0, 0]) == 0.0
    assert auc_score([1, 1, 1, 1], [1, 0, 1, 0]) == 0.5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(-3, 3), st.booleans()), min_size=2, max_size=40))
def test_auc_matches_rank_statistic_and_sklearn(pairs):
    scores = np.array([p[0] for p in pairs], dtype=float)
    labels = np.array([int(p[1]) for p in pairs])
    if labels.min() == labels.max():
        return
    a = auc_score(scores, labels)
    assert a == pytest.approx(mann_whitney_auc(scores, labels), abs=1e-12)
    assert a == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


def test_roc_errors():
    with pytest.raises(ValueError, match="at least one positive"):
        roc([1, 2], [1, 1])
    with pytest.raises(ValueError, match="binary"):
        roc([1, 2], [1, 2])
    with pytest.raises(ValueError, match="length"):
        roc([1, 2, 3], [1, 0])


def test_tpr_at_fpr_interpolates():
    c = roc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    # points (0,0) (0,.5) (.5,.5) (.5,1) (1,1)
    assert tpr_at_fpr(c, 0.0) == 0.5
    assert tpr_at_fpr(c, 0.25) == 0.5
    assert tpr_at_fpr(c, 0.5) == 1.0
    assert tpr_at_fpr(c, 1.0) == 1.0
    d = roc([3, 2, 1], [1, 0, 0])  # points (0,0) (0,1) (.5,1) (1,1)
    assert tpr_at_fpr(d, 0.01) == 1.0
    e = roc([1, 1, 0], [1, 0, 0])  # (0,0) (.5,1) (1,1)
    assert tpr_at_fpr(e, 0.25) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        tpr_at_fpr(c, 1.5)


def test_multiclass_accuracy_confusion():
    acc, C = multiclass_accuracy([0, 1, 1, 2], [0, 1, 2, 2])
    assert acc == 0.75
    assert C.tolist() == [[1, 0, 0], [0, 1, 0], [0, 1, 1]]
    acc, C = multiclass_accuracy([3], [3], classes=[1, 3])
    assert C.tolist() == [[0, 0], [0, 1]]
    with pytest.raises(ValueError, match="outside"):
        multiclass_accuracy([5], [1])


def test_average_runs():
    out = average_runs([{"a": 1.0, "b": 2.0}, {"a": 3.0, "b": 2.0}])
    assert out["a"] == (2.0, pytest.approx(np.sqrt(2.0)))
    assert out["b"] == (2.0, 0.0)
    assert average_runs([{"a": 0.7}]) == {"a": (0.7, 0.0)}
    with pytest.raises(ValueError):
        average_runs([])
    with pytest.raises(ValueError):
        average_runs([{"a": 1.0}, {"b": 1.0}])
