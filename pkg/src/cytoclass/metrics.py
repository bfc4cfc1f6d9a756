"""Confusion matrices, recall, one-vs-rest ROC curves and AUC."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateClass, EmptyMatrix, LabelOutOfRange, LengthMismatch


def confusion_matrix(y_true, y_pred, n_classes: int = 5) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise LengthMismatch(f"{len(y_true)} labels vs {len(y_pred)} predictions")
    for arr in (y_true, y_pred):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def accuracy(cm) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if total < 1:
        raise EmptyMatrix("confusion matrix is empty")
    return float(np.trace(cm) / total)


def per_class_recall(cm) -> np.ndarray:
    """Diagonal over row sums; classes without support get ``nan``."""
    cm = np.asarray(cm)
    if cm.sum() < 1:
        raise EmptyMatrix("confusion matrix is empty")
    support = cm.sum(axis=1)
    out = np.full(len(cm), np.nan)
    has = support > 0
    out[has] = np.diag(cm)[has] / support[has]
    return out


def row_normalized(cm) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    support = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, support, out=np.zeros_like(cm), where=support > 0)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def points(self) -> list:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_binary(y_binary, scores) -> RocCurve:
    """ROC for a binary problem; one point per distinct score, so tied
    scores move TPR and FPR together (a diagonal segment)."""
    y = np.asarray(y_binary).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClass("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    if fpr[-1] != 1.0 or tpr[-1] != 1.0:
        fpr, tpr = np.r_[fpr, 1.0], np.r_[tpr, 1.0]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, auc)


def roc_curve_ovr(y_true, scores, class_id: int) -> RocCurve:
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(y_true):
        raise LengthMismatch(f"{len(y_true)} labels vs {len(scores)} score rows")
    return roc_binary(y_true == class_id, scores[:, class_id])


def auc_paircount_oracle(y_binary, s) -> float:
    """Fraction of (positive, negative) pairs ordered correctly, ties half."""
    y = np.asarray(y_binary).astype(bool)
    s = np.asarray(s, dtype=np.float64)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise DegenerateClass("AUC needs at least one positive and one negative")
    diff = pos[:, None] - neg[None, :]
    wins = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
    return float(wins / (len(pos) * len(neg)))


@dataclass
class EvaluationReport:
    y_true: np.ndarray
    y_pred: np.ndarray
    scores: np.ndarray
    class_names: tuple

    @classmethod
    def from_scores(cls, y_true, scores, class_names) -> "EvaluationReport":
        scores = np.asarray(scores, dtype=np.float64)
        return cls(np.asarray(y_true, dtype=np.int64), np.argmax(scores, axis=1), scores, tuple(class_names))

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def confusion(self) -> np.ndarray:
        return confusion_matrix(self.y_true, self.y_pred, self.n_classes)

    @property
    def accuracy(self) -> float:
        return accuracy(self.confusion)

    @property
    def recall(self) -> np.ndarray:
        return per_class_recall(self.confusion)

    def roc_curves(self) -> dict:
        """Class id -> RocCurve, skipping classes without positives or negatives."""
        out = {}
        for c in range(self.n_classes):
            try:
                out[c] = roc_curve_ovr(self.y_true, self.scores, c)
            except DegenerateClass:
                continue
        return out
