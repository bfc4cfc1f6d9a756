import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cytoclass.errors import DegenerateClass, EmptyMatrix, LabelOutOfRange, LengthMismatch
from cytoclass.metrics import (EvaluationReport, accuracy, auc_paircount_oracle, confusion_matrix,
                               per_class_recall, roc_binary, roc_curve_ovr, row_normalized)


def test_confusion_examples():
    cm = confusion_matrix([0, 1, 2, 3, 4] * 2, [0, 1, 2, 3, 4] * 2)
    assert np.array_equal(cm, 2 * np.eye(5, dtype=int))
    assert accuracy(cm) == 1.0 and per_class_recall(cm).tolist() == [1.0] * 5
    cm = confusion_matrix([0, 1], [1, 0])
    assert cm[0, 1] == 1 and cm[1, 0] == 1 and np.trace(cm) == 0 and accuracy(cm) == 0.0


def test_accuracy_recall_arithmetic():
    cm = np.zeros((5, 5), dtype=int)
    cm[0, 0], cm[0, 1] = 93, 7
    assert accuracy(cm) == 0.93
    r = per_class_recall(cm)
    assert r[0] == 0.93 and np.all(np.isnan(r[1:]))
    assert row_normalized(cm)[0].tolist() == [0.93, 0.07, 0, 0, 0] and not row_normalized(cm)[1].any()
    with pytest.raises(EmptyMatrix):
        accuracy(np.zeros((5, 5)))
    with pytest.raises(EmptyMatrix):
        per_class_recall(np.zeros((5, 5)))


def test_confusion_errors():
    with pytest.raises(LengthMismatch):
        confusion_matrix([0, 1], [0])
    with pytest.raises(LabelOutOfRange):
        confusion_matrix([0, 5], [0, 0])
    with pytest.raises(LabelOutOfRange):
        confusion_matrix([0], [-1])


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=80))
def test_confusion_rows_and_accuracy_exact(pairs):
    t, p = np.array(pairs).T
    cm = confusion_matrix(t, p)
    assert np.array_equal(cm.sum(axis=1), np.bincount(t, minlength=5))
    assert accuracy(cm) == np.trace(cm) / len(t)
    assert accuracy(cm) == pytest.approx(np.mean(t == p), abs=0)


def test_roc_examples():
    c = roc_binary([1, 1, 0, 0], [0.9, 0.8, 0.2, 0.1])
    assert c.points[:3] == [(0.0, 0.0), (0.0, 0.5), (0.0, 1.0)] and c.points[-1] == (1.0, 1.0)
    assert c.auc == 1.0
    c = roc_binary([1, 0, 1, 0], [0.3] * 4)
    assert c.points == [(0.0, 0.0), (1.0, 1.0)] and c.auc == 0.5
    assert roc_binary([1, 1, 0, 0], [0.9, 0.4, 0.5, 0.1]).auc == 0.75
    assert auc_paircount_oracle([1, 1, 0, 0], [0.9, 0.4, 0.5, 0.1]) == 0.75
    assert auc_paircount_oracle([1, 0], [1.0, 0.0]) == 1.0
    assert auc_paircount_oracle([1, 0, 0], [2.0, 2.0, 2.0]) == 0.5


def test_roc_errors():
    with pytest.raises(DegenerateClass):
        roc_binary([1, 1], [0.1, 0.2])
    with pytest.raises(DegenerateClass):
        auc_paircount_oracle([0, 0], [0.1, 0.2])
    with pytest.raises(DegenerateClass):
        roc_curve_ovr([0, 0, 1], np.eye(5)[[0, 0, 1]], 3)
    with pytest.raises(LengthMismatch):
        roc_curve_ovr([0, 1], np.zeros((3, 5)), 0)


def scored_sets():
    """Random labels/scores with deliberate ties (scores drawn from a small grid)."""
    return st.integers(2, 200).flatmap(lambda n: st.tuples(
        st.lists(st.booleans(), min_size=n, max_size=n).filter(lambda y: 0 < sum(y) < len(y)),
        st.lists(st.integers(0, 12), min_size=n, max_size=n),
        st.integers(0, 2**32 - 1),
    ))


@given(scored_sets())
@settings(max_examples=300)
def test_trapezoid_auc_matches_pair_count(case):
    y, grid, seed = case
    noise = np.random.default_rng(seed).random(len(y)) * (seed % 2)  # half the cases tie-free
    s = np.array(grid) / 4.0 + noise
    c = roc_binary(y, s)
    assert abs(c.auc - auc_paircount_oracle(y, s)) <= 1e-9
    assert c.points[0] == (0.0, 0.0) and c.points[-1] == (1.0, 1.0)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
    assert 0 <= c.fpr.min() and c.fpr.max() <= 1 and 0 <= c.tpr.min() and c.tpr.max() <= 1
    assert abs(roc_binary(y, np.exp(3 * s) - 7).auc - c.auc) <= 1e-12


def test_report_properties():
    y = np.array([0, 1, 2, 3, 4, 0])
    s = np.eye(5)[[0, 1, 2, 3, 4, 1]]
    r = EvaluationReport.from_scores(y, s, "abcde")
    assert r.y_pred.tolist() == [0, 1, 2, 3, 4, 1]
    assert r.accuracy == 5 / 6 and r.recall[0] == 0.5
    assert sorted(r.roc_curves()) == [0, 1, 2, 3, 4]
    r2 = EvaluationReport.from_scores([0, 0, 1], np.eye(5)[[0, 0, 1]], "abcde")
    assert sorted(r2.roc_curves()) == [0, 1]  # classes without positives are skipped
    tie = EvaluationReport.from_scores([2], np.full((1, 5), 0.2), "abcde")
    assert tie.y_pred.tolist() == [0]  # argmax ties -> lowest index
