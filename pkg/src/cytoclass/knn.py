"""k-nearest-neighbour classification over feature rows."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyValidation, InvalidConfig
from .hog import FeatureMatrix

DEFAULT_K_GRID = (1, 3, 5, 7, 9, 11, 13, 15)
WEIGHTINGS = ("majority", "inverse_distance")


def exact_distances(train: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Euclidean distances from ``q`` to every row, summed row by row."""
    diff = train - q
    return np.sqrt(np.sum(diff * diff, axis=1))


def scan_neighbors(train: np.ndarray, q: np.ndarray, k: int):
    """Exhaustive O(n d) neighbour scan: ``(indices, distances)``.

    Ties on distance go to the lower row index (stable sort).
    """
    d = exact_distances(train, q)
    order = np.argsort(d, kind="stable")[:k]
    return order, d[order]


@dataclass
class KnnModel:
    train: FeatureMatrix
    k: int = 5
    weighting: str = "majority"
    n_classes: int = 5

    def __post_init__(self):
        if not 1 <= self.k <= self.train.rows:
            raise InvalidConfig(f"k={self.k} must lie in [1, {self.train.rows}]")
        if self.weighting not in WEIGHTINGS:
            raise InvalidConfig(f"weighting must be one of {WEIGHTINGS}")
        x = self.train.values
        self._sq_norms = np.einsum("ij,ij->i", x, x)

    def neighbors(self, queries: np.ndarray, k: int | None = None, chunk: int = 256):
        """Nearest neighbours of each query row.

        Candidates are shortlisted with the expanded-square form
        ``|a|^2 + |b|^2 - 2ab`` and then re-ranked on exact distances, so the
        result equals :func:`scan_neighbors` row for row.
        """
        k = self.k if k is None else k
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        x = self.train.values
        if queries.shape[1] != x.shape[1]:
            raise DimensionMismatch(f"query has {queries.shape[1]} features, model {x.shape[1]}")
        n = x.shape[0]
        idx_out = np.empty((len(queries), k), dtype=np.int64)
        dist_out = np.empty((len(queries), k))
        max_sq = self._sq_norms.max(initial=0.0)
        for start in range(0, len(queries), chunk):
            q = queries[start:start + chunk]
            q_sq = np.einsum("ij,ij->i", q, q)
            approx = self._sq_norms[None, :] + q_sq[:, None] - 2.0 * (q @ x.T)
            kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
            # bound on cancellation error of the expanded form
            slack = 1e-9 * (max_sq + q_sq) + 1e-12
            for r in range(len(q)):
                cand = np.flatnonzero(approx[r] <= kth[r] + slack[r])
                if len(cand) > n // 2:
                    cand = np.arange(n)
                d = exact_distances(x[cand], q[r])
                order = np.lexsort((cand, d))[:k]
                idx_out[start + r] = cand[order]
                dist_out[start + r] = d[order]
        return idx_out, dist_out

    def predict_scores(self, queries) -> np.ndarray:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        idx, dist = self.neighbors(queries)
        return self._vote(idx, dist, self.k)

    def _vote(self, idx, dist, k):
        labels = self.train.labels[idx[:, :k]]
        if self.weighting == "majority":
            w = np.ones_like(dist[:, :k])
        else:
            w = 1.0 / (dist[:, :k] + 1e-12)
        scores = np.zeros((len(idx), self.n_classes))
        rows = np.repeat(np.arange(len(idx)), k)
        np.add.at(scores, (rows, labels.ravel()), w.ravel())
        return scores / w.sum(axis=1, keepdims=True)

    def predict(self, queries) -> np.ndarray:
        return np.argmax(self.predict_scores(queries), axis=1)


def select_k(train: FeatureMatrix, val: FeatureMatrix, candidates=DEFAULT_K_GRID,
             weighting: str = "majority") -> int:
    """Candidate k with the best validation accuracy; ties go to the smaller k."""
    candidates = sorted(set(int(c) for c in candidates))
    if not candidates:
        raise InvalidConfig("no candidate k values")
    if val.rows == 0:
        raise EmptyValidation("validation split is empty")
    if candidates[-1] > train.rows:
        raise InvalidConfig(f"candidate k={candidates[-1]} exceeds {train.rows} training rows")
    model = KnnModel(train, candidates[-1], weighting)
    idx, dist = model.neighbors(val.values)
    best_k, best_acc = candidates[0], -1.0
    for k in candidates:
        pred = np.argmax(model._vote(idx, dist, k), axis=1)
        acc = float(np.mean(pred == val.labels))
        if acc > best_acc:
            best_k, best_acc = k, acc
    return best_k
