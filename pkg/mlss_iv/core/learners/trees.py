"""
Tree ensembles implemented on numpy: a CART regression tree, a bagged
random forest and squared-loss gradient boosting.
"""

from __future__ import annotations

import logging
from typing import List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

logger = logging.getLogger(__name__)

_LEAF = -1


def _best_split(
    x: np.ndarray,
    r: np.ndarray,
    features: np.ndarray,
    min_leaf: int,
    tol: float,
) -> Tuple[int, float, float]:
    """
    Best squared-error split of the rows (x, r).

    Candidates are midpoints between consecutive distinct sorted values with at
    least ``min_leaf`` rows on either side. Ties go to the lowest feature index,
    then the lowest threshold.

    Returns:
        (feature, threshold, gain); feature is -1 when no split improves by more than ``tol``
    """
    n = r.shape[0]
    total = r.sum()
    n_left = np.arange(1, n, dtype=float)
    n_right = n - n_left
    size_ok = (n_left >= min_leaf) & (n_right >= min_leaf)
    best_feature, best_threshold, best_gain = _LEAF, np.nan, tol
    for f in features:
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        s_left = np.cumsum(r[order])[:-1]
        valid = size_ok & (xs[1:] > xs[:-1])
        if not valid.any():
            continue
        s_right = total - s_left
        gain = s_left ** 2 / n_left + s_right ** 2 / n_right - total ** 2 / n
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best_gain:
            lo, hi = xs[i], xs[i + 1]
            threshold = lo + (hi - lo) / 2.0
            if threshold >= hi:
                threshold = lo
            best_feature, best_threshold, best_gain = int(f), float(threshold), float(gain[i])
    return best_feature, best_threshold, best_gain


class RegressionTree:
    """CART regression tree stored as flat node arrays."""

    def __init__(
        self,
        max_depth: int = 3,
        min_leaf: int = 5,
        max_features: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
    ):
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.max_features = max_features
        self.rng = rng

    def _candidate_features(self, q: int) -> np.ndarray:
        if self.max_features is None or self.max_features >= q:
            return np.arange(q)
        return np.sort(self.rng.choice(q, size=self.max_features, replace=False))

    def fit(self, x: np.ndarray, y: np.ndarray) -> "RegressionTree":
        feature: List[int] = []
        threshold: List[float] = []
        left: List[int] = []
        right: List[int] = []
        value: List[float] = []

        def new_node(rows: np.ndarray) -> int:
            feature.append(_LEAF)
            threshold.append(np.nan)
            left.append(_LEAF)
            right.append(_LEAF)
            value.append(float(np.mean(y[rows])))
            return len(value) - 1

        tol = 1e-12 * max(1.0, float(np.dot(y, y)))
        root = np.arange(y.shape[0])
        stack = [(new_node(root), root, 0)]
        while stack:
            node, rows, depth = stack.pop()
            if depth >= self.max_depth or rows.size < 2 * self.min_leaf:
                continue
            f, thr, _ = _best_split(
                x[rows], y[rows], self._candidate_features(x.shape[1]), self.min_leaf, tol
            )
            if f == _LEAF:
                continue
            go_left = x[rows, f] <= thr
            left_rows, right_rows = rows[go_left], rows[~go_left]
            feature[node], threshold[node] = f, thr
            left[node] = new_node(left_rows)
            right[node] = new_node(right_rows)
            stack.append((right[node], right_rows, depth + 1))
            stack.append((left[node], left_rows, depth + 1))

        self.feature_ = np.asarray(feature, dtype=int)
        self.threshold_ = np.asarray(threshold, dtype=float)
        self.left_ = np.asarray(left, dtype=int)
        self.right_ = np.asarray(right, dtype=int)
        self.value_ = np.asarray(value, dtype=float)
        return self

    @property
    def node_count(self) -> int:
        return int(self.value_.shape[0])

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=int)
        for _ in range(self.max_depth):
            feat = self.feature_[node]
            active = np.nonzero(feat != _LEAF)[0]
            if active.size == 0:
                break
            cur = node[active]
            go_left = x[active, feat[active]] <= self.threshold_[cur]
            node[active] = np.where(go_left, self.left_[cur], self.right_[cur])
        return self.value_[node]


def _resolve_max_features(max_features, q: int) -> Optional[int]:
    if max_features is None:
        return None
    if max_features == "sqrt":
        return max(1, int(np.sqrt(q)))
    if isinstance(max_features, float):
        return max(1, int(round(max_features * q)))
    return int(max_features)


def _tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    # independent stream per (seed, tree) so results do not depend on worker count
    return np.random.default_rng([int(seed) % 2**64, tree_index])


class RandomForestModel:
    """Bagged CART trees with per-split feature subsampling."""

    def __init__(
        self,
        n_trees: int = 200,
        max_depth: int = 8,
        min_leaf: int = 5,
        max_features="sqrt",
        bootstrap: bool = True,
        seed: int = 0,
        n_jobs: int = 1,
    ):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.seed = seed
        self.n_jobs = n_jobs
        self.warnings: List[str] = []

    def _fit_tree(self, x: np.ndarray, y: np.ndarray, tree_index: int) -> RegressionTree:
        rng = _tree_rng(self.seed, tree_index)
        rows = rng.integers(0, y.shape[0], size=y.shape[0]) if self.bootstrap else np.arange(y.shape[0])
        tree = RegressionTree(
            max_depth=self.max_depth,
            min_leaf=self.min_leaf,
            max_features=_resolve_max_features(self.max_features, x.shape[1]),
            rng=rng,
        )
        return tree.fit(x[rows], y[rows])

    def fit(self, x: np.ndarray, y: np.ndarray) -> "RandomForestModel":
        if self.n_jobs == 1:
            self.trees_ = [self._fit_tree(x, y, b) for b in range(self.n_trees)]
        else:
            self.trees_ = Parallel(n_jobs=self.n_jobs, prefer="threads")(
                delayed(self._fit_tree)(x, y, b) for b in range(self.n_trees)
            )
        return self

    def per_tree_predict(self, x: np.ndarray) -> np.ndarray:
        """Predictions of every tree, shape (n_trees, m)."""
        return np.vstack([tree.predict(x) for tree in self.trees_])

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.per_tree_predict(x).mean(axis=0)


class GradientBoostingModel:
    """Squared-loss gradient boosting with a mean base score and fixed tree count."""

    def __init__(
        self,
        n_trees: int = 200,
        max_depth: int = 3,
        learning_rate: float = 0.1,
        min_leaf: int = 5,
    ):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.min_leaf = min_leaf
        self.warnings: List[str] = []

    def fit(self, x: np.ndarray, y: np.ndarray) -> "GradientBoostingModel":
        self.base_score_ = float(np.mean(y))
        fitted = np.full(y.shape[0], self.base_score_)
        self.trees_: List[RegressionTree] = []
        self.train_loss_: List[float] = [float(np.mean((y - fitted) ** 2))]
        for _ in range(self.n_trees):
            tree = RegressionTree(max_depth=self.max_depth, min_leaf=self.min_leaf).fit(x, y - fitted)
            fitted = fitted + self.learning_rate * tree.predict(x)
            self.trees_.append(tree)
            self.train_loss_.append(float(np.mean((y - fitted) ** 2)))
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = np.full(x.shape[0], self.base_score_)
        for tree in self.trees_:
            out = out + self.learning_rate * tree.predict(x)
        return out
