"""Gradient boosted trees for binary logistic loss, implemented from scratch.

Second-order boosting: each round fits a regression tree to the gradient
g_i = p_i - y_i and hessian h_i = p_i (1 - p_i) of the logistic loss, with
exact greedy split search, L2 leaf regularization and tree/level/node column
subsampling. Training is fully deterministic given the hyperparameter seed:
column subsampling draws from one RNG stream per tree index and split search
iterates features in ascending order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class GbtError(Exception):
    pass


@dataclass(frozen=True)
class GbtHyperparams:
    n_estimators: int = 100
    learning_rate: float = 0.1
    colsample_by_tree: float = 1.0
    colsample_by_level: float = 1.0
    colsample_by_node: float = 1.0
    max_depth: int = 6
    l2_leaf_reg: float = 1.0
    min_child_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise GbtError("n_estimators must be >= 1")
        if self.learning_rate <= 0:
            raise GbtError("learning_rate must be positive")
        for name in ("colsample_by_tree", "colsample_by_level", "colsample_by_node"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise GbtError(f"{name} must lie in (0, 1]")
        if self.max_depth < 1:
            raise GbtError("max_depth must be >= 1")
        if self.l2_leaf_reg < 0 or self.min_child_weight < 0:
            raise GbtError("regularization terms must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "n_estimators": self.n_estimators,
            "learning_rate": self.learning_rate,
            "colsample_by_tree": self.colsample_by_tree,
            "colsample_by_level": self.colsample_by_level,
            "colsample_by_node": self.colsample_by_node,
            "max_depth": self.max_depth,
            "l2_leaf_reg": self.l2_leaf_reg,
            "min_child_weight": self.min_child_weight,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GbtHyperparams":
        return cls(**obj)


@dataclass(eq=False)
class Tree:
    """Array-encoded binary tree. feature < 0 marks a leaf.

    Routing rule: go left when x[feature] < threshold.
    """

    feature: np.ndarray  # int32
    threshold: np.ndarray  # float64
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    value: np.ndarray  # float64, leaf weight (learning-rate scaled)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int32)
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                return self.value[node]
            rows = np.nonzero(internal)[0]
            nd = node[rows]
            go_left = X[rows, feat[rows]] < self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Tree":
        return cls(
            feature=np.asarray(obj["feature"], dtype=np.int32),
            threshold=np.asarray(obj["threshold"], dtype=np.float64),
            left=np.asarray(obj["left"], dtype=np.int32),
            right=np.asarray(obj["right"], dtype=np.int32),
            value=np.asarray(obj["value"], dtype=np.float64),
        )


@dataclass(eq=False)
class GbtEnsemble:
    base_score: float  # log-odds offset
    trees: list[Tree] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)  # logistic loss per round

    def raw_margin(self, X: np.ndarray) -> np.ndarray:
        margin = np.full(X.shape[0], self.base_score, dtype=np.float64)
        for tree in self.trees:
            margin += tree.predict(X)
        return margin

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return expit(self.raw_margin(np.asarray(X, dtype=np.float64)))

    def to_dict(self) -> dict:
        return {
            "base_score": self.base_score,
            "trees": [t.to_dict() for t in self.trees],
            "train_losses": self.train_losses,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GbtEnsemble":
        return cls(
            base_score=float(obj["base_score"]),
            trees=[Tree.from_dict(t) for t in obj["trees"]],
            train_losses=[float(v) for v in obj.get("train_losses", [])],
        )


def split_gain(
    g_left: float, h_left: float, g_right: float, h_right: float, l2: float
) -> float:
    """Second-order gain of a split under L2 leaf regularization."""
    parent = (g_left + g_right) ** 2 / (h_left + h_right + l2)
    return 0.5 * (g_left**2 / (h_left + l2) + g_right**2 / (h_right + l2) - parent)


def leaf_value(g_sum: float, h_sum: float, l2: float) -> float:
    return -g_sum / (h_sum + l2)


def _subsample(cols: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if fraction >= 1.0 or cols.shape[0] <= 1:
        return cols
    k = max(1, int(round(fraction * cols.shape[0])))
    if k >= cols.shape[0]:
        return cols
    chosen = rng.choice(cols, size=k, replace=False)
    chosen.sort()
    return chosen


def _best_split_for_feature(x: np.ndarray, g: np.ndarray, h: np.ndarray, hp: GbtHyperparams):
    """Best (gain, threshold) over midpoints of consecutive distinct values."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    boundaries = np.nonzero(xs[:-1] < xs[1:])[0]
    if boundaries.shape[0] == 0:
        return None
    g_cum = np.cumsum(g[order])[boundaries]
    h_cum = np.cumsum(h[order])[boundaries]
    g_tot = g.sum()
    h_tot = h.sum()
    g_right = g_tot - g_cum
    h_right = h_tot - h_cum
    l2 = hp.l2_leaf_reg
    gains = 0.5 * (
        g_cum**2 / (h_cum + l2)
        + g_right**2 / (h_right + l2)
        - g_tot**2 / (h_tot + l2)
    )
    ok = (h_cum >= hp.min_child_weight) & (h_right >= hp.min_child_weight)
    if not ok.any():
        return None
    gains = np.where(ok, gains, -np.inf)
    best = int(np.argmax(gains))
    threshold = 0.5 * (xs[boundaries[best]] + xs[boundaries[best] + 1])
    return float(gains[best]), threshold


def _build_tree(
    X: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    hp: GbtHyperparams,
    tree_cols: np.ndarray,
    rng: np.random.Generator,
) -> Tree:
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    frontier: list[tuple[int, np.ndarray]] = [(root, np.arange(X.shape[0]))]
    depth = 0
    while frontier and depth < hp.max_depth:
        level_cols = _subsample(tree_cols, hp.colsample_by_level, rng)
        next_frontier: list[tuple[int, np.ndarray]] = []
        for node_id, idx in frontier:
            node_cols = _subsample(level_cols, hp.colsample_by_node, rng)
            g_node = g[idx]
            h_node = h[idx]
            best_gain = 0.0
            best_feat = -1
            best_thr = 0.0
            for f in node_cols:
                found = _best_split_for_feature(X[idx, f], g_node, h_node, hp)
                if found is not None and found[0] > best_gain:
                    best_gain, best_thr = found
                    best_feat = int(f)
            if best_feat < 0:
                value[node_id] = hp.learning_rate * leaf_value(
                    g_node.sum(), h_node.sum(), hp.l2_leaf_reg
                )
                continue
            go_left = X[idx, best_feat] < best_thr
            feature[node_id] = best_feat
            threshold[node_id] = best_thr
            left_id = new_node()
            right_id = new_node()
            left[node_id] = left_id
            right[node_id] = right_id
            next_frontier.append((left_id, idx[go_left]))
            next_frontier.append((right_id, idx[~go_left]))
        frontier = next_frontier
        depth += 1
    for node_id, idx in frontier:  # depth limit reached
        value[node_id] = hp.learning_rate * leaf_value(
            g[idx].sum(), h[idx].sum(), hp.l2_leaf_reg
        )
    return Tree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        value=np.asarray(value, dtype=np.float64),
    )


def logistic_loss(y: np.ndarray, margin: np.ndarray) -> float:
    """Mean logistic loss at the given raw margins."""
    # log(1 + exp(-z)) computed stably via logaddexp
    z = np.where(y > 0, margin, -margin)
    return float(np.logaddexp(0.0, -z).mean())


def train_gbt_ensemble(X: np.ndarray, y: np.ndarray, hp: GbtHyperparams) -> GbtEnsemble:
    """Boost hp.n_estimators trees under logistic loss. Deterministic by seed."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise GbtError("X must be a nonempty 2-D matrix")
    if X.shape[0] != y.shape[0]:
        raise GbtError("X and y row counts differ")
    if not np.all(np.isfinite(X)):
        raise GbtError("X contains NaN or infinite entries")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise GbtError("y must be binary {0, 1}")
    if y.min() == y.max():
        raise GbtError("training labels contain a single class")

    n, d = X.shape
    p0 = y.mean()
    ensemble = GbtEnsemble(base_score=float(np.log(p0 / (1.0 - p0))))
    margin = np.full(n, ensemble.base_score, dtype=np.float64)
    all_cols = np.arange(d)
    for t in range(hp.n_estimators):
        p = expit(margin)
        g = p - y
        h = p * (1.0 - p)
        rng = np.random.default_rng([hp.seed & 0xFFFFFFFF, t])
        tree_cols = _subsample(all_cols, hp.colsample_by_tree, rng)
        tree = _build_tree(X, g, h, hp, tree_cols, rng)
        margin += tree.predict(X)
        ensemble.trees.append(tree)
        ensemble.train_losses.append(logistic_loss(y, margin))
    return ensemble
