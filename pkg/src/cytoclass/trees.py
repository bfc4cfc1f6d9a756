"""Decision trees, random forests with out-of-bag estimates, and
multinomial gradient boosting.

Trees are stored as flat node arrays (``feature == -1`` marks a leaf);
internal nodes send ``x`` left iff ``x[feature] <= threshold``.

Split search maximizes ``sum_k S_lk^2 / n_l + S_rk^2 / n_r`` where ``S`` are
per-child sums of the target columns. With one-hot targets this is the
Gini criterion (weighted child impurity ``n - score``), with a single
real target it is the variance criterion, so one search serves both modes.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyNode, InvalidConfig, MissingClass
from .hog import FeatureMatrix
from .rng import SplitMix64

TIE_RTOL = 1e-9
LEAF_EPS = 1e-12


def gini_impurity(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    if n < 1:
        raise EmptyNode("gini impurity of an empty node")
    p = counts / n
    return float(1.0 - np.sum(p * p))


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, n_outputs); class counts or regression value

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        X = np.atleast_2d(X)
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while len(active):
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict_value(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


@dataclass(frozen=True)
class TreeConfig:
    max_features: int | None = None  # None: all features
    min_leaf: int = 1
    max_depth: int | None = None

    def __post_init__(self):
        if self.min_leaf < 1:
            raise InvalidConfig("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise InvalidConfig("max_depth must be >= 0")


def _best_split(vals: np.ndarray, tg: np.ndarray, feats: np.ndarray, min_leaf: int):
    """Best ``(feature, threshold)`` given per-feature sorted values.

    ``vals`` is ``(m, n)`` with each row sorted ascending, ``tg`` the
    ``(m, n, k)`` targets in the same order, ``feats`` ascending feature ids.
    Ties (relative ``TIE_RTOL``) go to the lower feature, then the lower
    threshold. Returns ``None`` when no valid split exists.
    """
    m, n = vals.shape
    if n < 2 * min_leaf:
        return None
    n_left = np.arange(1, n, dtype=np.float64)
    n_right = n - n_left
    if tg.shape[2] == 1:
        csum = np.cumsum(tg[:, :, 0], axis=1)
        left = csum[:, :-1]
        right = csum[:, -1:] - left
        score = left * left / n_left + right * right / n_right
    else:
        csum = np.cumsum(tg, axis=1)
        left = csum[:, :-1, :]
        right = csum[:, -1:, :] - left
        score = np.sum(left * left, axis=2) / n_left + np.sum(right * right, axis=2) / n_right
    valid = vals[:, :-1] < vals[:, 1:]
    valid[:, : min_leaf - 1] = False
    valid[:, n - min_leaf:] = False
    if not valid.any():
        return None
    score = np.where(valid, score, -np.inf)
    best = score.max()
    tied = score >= best - TIE_RTOL * max(1.0, abs(best))
    flat = int(np.argmax(tied.ravel()))  # row-major: lowest feature, then lowest position
    j, pos = divmod(flat, n - 1)
    lo, hi = vals[j, pos], vals[j, pos + 1]
    thr = (lo + hi) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return int(feats[j]), float(thr)


class _Grower:
    """Greedy depth-first tree growth on a column-major feature matrix."""

    def __init__(self, XT, targets, cfg: TreeConfig, rng: SplitMix64 | None, leaf_counts: bool,
                 presorted: np.ndarray | None = None):
        self.XT = XT
        self.T = targets
        self.cfg = cfg
        self.rng = rng
        self.leaf_counts = leaf_counts
        p = XT.shape[0]
        self.m = p if cfg.max_features is None else min(cfg.max_features, p)
        self.presorted = presorted

    def grow(self, rows: np.ndarray) -> Tree:
        if len(rows) == 0:
            raise EmptyNode("cannot grow a tree on zero samples")
        if self.m == self.XT.shape[0] and self.presorted is None:
            sub = self.XT[:, rows]
            self.presorted = rows[np.argsort(sub, axis=1, kind="stable")]
        feature, threshold, left, right, value = [], [], [], [], []

        def new_node(node_rows):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            t = self.T[node_rows]
            value.append(t.sum(axis=0) if self.leaf_counts else t.mean(axis=0))
            return len(feature) - 1

        root = new_node(rows)
        stack = [(root, rows, self.presorted, 0)]
        while stack:
            node, node_rows, order, depth = stack.pop()
            split = self._split(node_rows, order, depth)
            if split is None:
                continue
            f, thr = split
            goes_left = self.XT[f] <= thr
            lmask = goes_left[node_rows]
            l_rows, r_rows = node_rows[lmask], node_rows[~lmask]
            l_ord = r_ord = None
            leaf_next = (
                self.cfg.max_depth is not None and depth + 1 >= self.cfg.max_depth
            )
            if order is not None and not leaf_next:
                sel = goes_left[order]
                p = order.shape[0]
                l_ord = order[sel].reshape(p, len(l_rows))
                r_ord = order[~sel].reshape(p, len(r_rows))
            feature[node], threshold[node] = f, thr
            left[node] = new_node(l_rows)
            right[node] = new_node(r_rows)
            # right pushed first so the left subtree is grown (and draws) first
            stack.append((right[node], r_rows, r_ord, depth + 1))
            stack.append((left[node], l_rows, l_ord, depth + 1))
        return Tree(
            np.asarray(feature, dtype=np.int64),
            np.asarray(threshold, dtype=np.float64),
            np.asarray(left, dtype=np.int64),
            np.asarray(right, dtype=np.int64),
            np.asarray(value, dtype=np.float64),
        )

    def _split(self, rows, order, depth):
        cfg = self.cfg
        if cfg.max_depth is not None and depth >= cfg.max_depth:
            return None
        if len(rows) < 2 * cfg.min_leaf:
            return None
        t = self.T[rows]
        if np.all(t == t[0]):
            return None
        if order is not None:
            feats = np.arange(self.XT.shape[0])
            vals = np.take_along_axis(self.XT, order, axis=1)
            tg = self.T[order]
        else:
            feats = np.sort(self.rng.sample(self.XT.shape[0], self.m))
            sub = self.XT[feats][:, rows]
            idx = np.argsort(sub, axis=1, kind="stable")
            vals = np.take_along_axis(sub, idx, axis=1)
            tg = self.T[rows[idx]]
        return _best_split(vals, tg, feats, cfg.min_leaf)


def grow_tree(X, y, cfg: TreeConfig = TreeConfig(), rng: SplitMix64 | None = None,
              mode: str = "classify", n_classes: int = 5) -> Tree:
    """Grow one tree. ``mode`` is ``"classify"`` (integer labels, Gini,
    class-count leaves) or ``"regress"`` (real targets, variance, mean leaves).
    """
    X = np.asarray(X, dtype=np.float64)
    if mode == "classify":
        targets = np.eye(n_classes)[np.asarray(y, dtype=np.int64)]
    elif mode == "regress":
        targets = np.asarray(y, dtype=np.float64).reshape(len(X), -1)
    else:
        raise InvalidConfig(f"unknown tree mode {mode!r}")
    if cfg.max_features is not None and cfg.max_features < X.shape[1] and rng is None:
        raise InvalidConfig("feature subsampling needs an rng stream")
    grower = _Grower(np.ascontiguousarray(X.T), targets, cfg, rng, mode == "classify")
    return grower.grow(np.arange(len(X)))


def _vote(tree: Tree, X: np.ndarray) -> np.ndarray:
    return np.argmax(tree.predict_value(X), axis=1)


# -- random forest --------------------------------------------------------

@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_features: int | None = None  # None: floor(sqrt(p))
    min_leaf: int = 1
    max_depth: int | None = None
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise InvalidConfig("n_trees must be >= 1")


@dataclass
class Forest:
    trees: list
    in_bag: np.ndarray  # (n_trees, n_train) bool
    cfg: ForestConfig
    n_features: int
    n_classes: int = 5

    def predict_scores(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {X.shape[1]}")
        scores = np.zeros((len(X), self.n_classes))
        rows = np.arange(len(X))
        for tree in self.trees:
            scores[rows, _vote(tree, X)] += 1.0
        return scores / len(self.trees)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_scores(X), axis=1)


def bootstrap_indices(n: int, rng: SplitMix64) -> np.ndarray:
    return rng.below(n, n)


def rf_fit(F: FeatureMatrix, cfg: ForestConfig = ForestConfig(), seed: int = 0,
           n_jobs: int = 1, n_classes: int = 5) -> Forest:
    n, p = F.values.shape
    if n < 2:
        raise InvalidConfig("random forest needs at least 2 rows")
    m = cfg.max_features if cfg.max_features is not None else max(1, math.isqrt(p))
    if not 1 <= m <= p:
        raise InvalidConfig(f"max_features={m} outside [1, {p}]")
    tcfg = TreeConfig(max_features=m, min_leaf=cfg.min_leaf, max_depth=cfg.max_depth)
    XT = np.ascontiguousarray(F.values.T)
    targets = np.eye(n_classes)[F.labels]

    def fit_one(t):
        rng = SplitMix64.derived(seed, t)
        rows = bootstrap_indices(n, rng) if cfg.bootstrap else np.arange(n)
        tree = _Grower(XT, targets, tcfg, rng, leaf_counts=True).grow(rows)
        return tree, np.bincount(rows, minlength=n) > 0

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            fitted = list(pool.map(fit_one, range(cfg.n_trees)))
    else:
        fitted = [fit_one(t) for t in range(cfg.n_trees)]
    trees = [t for t, _ in fitted]
    in_bag = np.stack([b for _, b in fitted])
    return Forest(trees, in_bag, cfg, p, n_classes)


def rf_predict_scores(f: Forest, x) -> np.ndarray:
    return f.predict_scores(x)


@dataclass(frozen=True)
class OobResult:
    accuracy: float  # nan when no row has an out-of-bag tree
    n_evaluated: int
    n_skipped: int


def rf_oob_accuracy(f: Forest, F: FeatureMatrix) -> OobResult:
    n = F.rows
    if f.in_bag.shape[1] != n:
        raise DimensionMismatch("feature matrix is not the forest's training set")
    votes = np.zeros((n, f.n_classes))
    rows = np.arange(n)
    for tree, bag in zip(f.trees, f.in_bag):
        oob = rows[~bag]
        if len(oob):
            votes[oob, _vote(tree, F.values[oob])] += 1.0
    has_oob = votes.sum(axis=1) > 0
    n_eval = int(has_oob.sum())
    if n_eval == 0:
        return OobResult(float("nan"), 0, n)
    pred = np.argmax(votes[has_oob], axis=1)
    acc = float(np.mean(pred == F.labels[has_oob]))
    return OobResult(acc, n_eval, n - n_eval)


# -- gradient boosting ----------------------------------------------------

@dataclass(frozen=True)
class BoostConfig:
    n_rounds: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5

    def __post_init__(self):
        if self.n_rounds < 0 or self.learning_rate < 0:
            raise InvalidConfig("n_rounds and learning_rate must be non-negative")


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def deviance(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean multinomial negative log-likelihood of raw class scores."""
    z = scores - scores.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


@dataclass
class BoostedEnsemble:
    base_scores: np.ndarray
    rounds: list  # one list of n_classes regression trees per round
    learning_rate: float
    cfg: BoostConfig
    n_features: int
    loss_trace: list = field(default_factory=list)
    train_scores: np.ndarray | None = None

    def raw_scores(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {X.shape[1]}")
        out = np.tile(self.base_scores, (len(X), 1))
        for trees in self.rounds:
            for k, tree in enumerate(trees):
                out[:, k] += self.learning_rate * tree.predict_value(X)[:, 0]
        return out

    def predict_scores(self, X) -> np.ndarray:
        return softmax(self.raw_scores(X))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.raw_scores(X), axis=1)


def gbm_fit(F: FeatureMatrix, cfg: BoostConfig = BoostConfig(), n_classes: int = 5) -> BoostedEnsemble:
    X, y = F.values, F.labels
    n, p = X.shape
    if n < 2:
        raise InvalidConfig("gradient boosting needs at least 2 rows")
    counts = np.bincount(y, minlength=n_classes)
    if np.any(counts == 0):
        raise MissingClass(f"classes {np.flatnonzero(counts == 0).tolist()} absent from training data")
    base = np.log(counts / n)
    onehot = np.eye(n_classes)[y]
    scores = np.tile(base, (n, 1))
    XT = np.ascontiguousarray(X.T)
    tcfg = TreeConfig(max_features=None, min_leaf=cfg.min_leaf, max_depth=cfg.max_depth)
    rows = np.arange(n)
    presorted = np.argsort(XT, axis=1, kind="stable")
    rounds = []
    trace = [deviance(scores, y)]
    for _ in range(cfg.n_rounds):
        resid = onehot - softmax(scores)
        trees = []
        for k in range(n_classes):
            r = resid[:, k]
            tree = _Grower(XT, r[:, None], tcfg, None, False, presorted).grow(rows)
            leaf = tree.apply(X)
            num = np.bincount(leaf, r, tree.n_nodes)
            den = np.bincount(leaf, np.abs(r) * (1.0 - np.abs(r)), tree.n_nodes)
            tree.value = (num / np.maximum(den, LEAF_EPS))[:, None]
            scores[:, k] += cfg.learning_rate * tree.value[leaf, 0]
            trees.append(tree)
        rounds.append(trees)
        trace.append(deviance(scores, y))
    return BoostedEnsemble(base, rounds, cfg.learning_rate, cfg, p, trace, scores)


def gbm_predict_scores(b: BoostedEnsemble, x) -> np.ndarray:
    return b.predict_scores(x)
