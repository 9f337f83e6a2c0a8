"""A small random forest over fixed-length feature vectors.

Bagged CART trees with Gini splits and per-split feature subsampling.
Deterministic given the seed; trees serialize to plain dicts so a trained
filter round-trips through JSON.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TreeNode:
    feature: int | None = None
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    prediction: float = 0.5  # P(class 1) at a leaf

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"p": self.prediction}
        return {
            "f": self.feature,
            "t": self.threshold,
            "l": self.left.to_dict(),
            "r": self.right.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "TreeNode":
        if "p" in d:
            return TreeNode(prediction=d["p"])
        return TreeNode(
            feature=d["f"],
            threshold=d["t"],
            left=TreeNode.from_dict(d["l"]),
            right=TreeNode.from_dict(d["r"]),
        )


def _gini(labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    p = labels.mean()
    return 2.0 * p * (1.0 - p)


def _best_split(
    x: np.ndarray, y: np.ndarray, features: np.ndarray
) -> tuple[int, float] | None:
    best = None
    best_cost = np.inf
    n = len(y)
    for f in features:
        values = np.unique(x[:, f])
        if len(values) < 2:
            continue
        for threshold in (values[:-1] + values[1:]) / 2.0:
            mask = x[:, f] <= threshold
            n_left = int(mask.sum())
            if n_left == 0 or n_left == n:
                continue
            cost = (n_left * _gini(y[mask]) + (n - n_left) * _gini(y[~mask])) / n
            if cost < best_cost:
                best_cost = cost
                best = (int(f), float(threshold))
    return best


def _grow(
    x: np.ndarray,
    y: np.ndarray,
    depth: int,
    max_depth: int,
    min_leaf: int,
    n_features: int,
    rng: np.random.Generator,
) -> TreeNode:
    if depth >= max_depth or len(y) < 2 * min_leaf or len(np.unique(y)) == 1:
        return TreeNode(prediction=float(y.mean()))
    features = rng.permutation(x.shape[1])[:n_features]
    split = _best_split(x, y, features)
    if split is None:
        return TreeNode(prediction=float(y.mean()))
    f, threshold = split
    mask = x[:, f] <= threshold
    return TreeNode(
        feature=f,
        threshold=threshold,
        left=_grow(x[mask], y[mask], depth + 1, max_depth, min_leaf, n_features, rng),
        right=_grow(x[~mask], y[~mask], depth + 1, max_depth, min_leaf, n_features, rng),
    )


def _tree_prob(node: TreeNode, row: np.ndarray) -> float:
    while not node.is_leaf:
        node = node.left if row[node.feature] <= node.threshold else node.right
    return node.prediction


@dataclass
class RandomForest:
    n_trees: int = 50
    max_depth: int = 6
    min_leaf: int = 1
    seed: int = 0
    trees: list[TreeNode] = field(default_factory=list)

    def fit(self, x: np.ndarray, y: np.ndarray) -> "RandomForest":
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=int)
        if x.ndim != 2 or len(x) != len(y):
            raise ValueError(f"bad training shapes {x.shape} / {y.shape}")
        classes = np.unique(y)
        if len(classes) < 2:
            raise ValueError("training data contains a single class")
        for cls in classes:
            if (y == cls).sum() < 2:
                raise ValueError(f"class {cls} has fewer than 2 samples")
        rng = np.random.default_rng(self.seed)
        n_features = max(1, int(np.sqrt(x.shape[1])))
        self.trees = []
        for _ in range(self.n_trees):
            idx = rng.integers(0, len(y), size=len(y))
            self.trees.append(
                _grow(x[idx], y[idx], 0, self.max_depth, self.min_leaf, n_features, rng)
            )
        return self

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        if not self.trees:
            raise ValueError("forest is not trained")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        probs = np.empty(len(x))
        for i, row in enumerate(x):
            probs[i] = float(np.mean([_tree_prob(t, row) for t in self.trees]))
        return probs

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.predict_proba(x) >= 0.5).astype(int)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float((self.predict(x) == np.asarray(y, dtype=int)).mean())

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "seed": self.seed,
            "trees": [t.to_dict() for t in self.trees],
        }

    @staticmethod
    def from_dict(d: dict) -> "RandomForest":
        forest = RandomForest(
            n_trees=d["n_trees"],
            max_depth=d["max_depth"],
            min_leaf=d["min_leaf"],
            seed=d["seed"],
        )
        forest.trees = [TreeNode.from_dict(t) for t in d["trees"]]
        return forest
