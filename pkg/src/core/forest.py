"""Random forest black box: CART trees with Gini splits and missing-value routing.

Trees are stored as flat node arrays. A NaN feature value is routed to the child
that received more non-missing training rows at that split (left on ties), so every
instance reaches exactly one leaf per tree.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ValidationError

from src.data.dataset import Dataset
from src.models.errors import ForestError

logger = logging.getLogger(__name__)

FOREST_FORMAT = "protoalike-forest"
FOREST_FORMAT_VERSION = 1


class ForestParams(BaseModel):
    """Training hyperparameters.

    Attributes:
        n_trees: Number of trees (>= 1).
        max_depth: Maximum number of split levels (>= 1).
        min_leaf: Minimum training rows in each child of a split (>= 1).
        mtry: Features sampled per split; ``None`` means ``ceil(sqrt(d))``.
        seed: Seed for bootstrap and feature sampling.
    """

    n_trees: int = 100
    max_depth: int = 8
    min_leaf: int = 2
    mtry: int | None = None
    seed: int = 0

    def resolved_mtry(self, n_features: int) -> int:
        """Number of features to sample per split for *n_features* columns."""
        return self.mtry if self.mtry is not None else math.ceil(math.sqrt(n_features))


@dataclass(frozen=True, eq=False)
class Tree:
    """One binary decision tree in flat-array form.

    Internal nodes have ``feature >= 0`` and ``leaf_id == -1``; leaves have
    ``feature == -1`` and a tree-unique ``leaf_id``. ``value`` holds the training
    class distribution of every node, internal ones included.
    """

    feature: np.ndarray
    threshold: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    count: np.ndarray
    value: np.ndarray
    leaf_id: np.ndarray

    @property
    def n_nodes(self) -> int:
        """Total node count."""
        return self.feature.shape[0]

    @property
    def n_leaves(self) -> int:
        """Leaf count."""
        return int((self.feature < 0).sum())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Return the leaf node index reached by every row of *X*."""
        nodes = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[nodes] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            cur = nodes[idx]
            values = X[idx, self.feature[cur]]
            go_left = np.where(
                np.isnan(values), self.missing_left[cur], values <= self.threshold[cur]
            )
            nodes[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[nodes] >= 0
        return nodes

    def decision_path(self, x: np.ndarray) -> list[int]:
        """Node indices visited by a single instance, root first."""
        node = 0
        path = [node]
        while self.feature[node] >= 0:
            value = x[self.feature[node]]
            if np.isnan(value):
                go_left = bool(self.missing_left[node])
            else:
                go_left = bool(value <= self.threshold[node])
            node = int(self.left[node] if go_left else self.right[node])
            path.append(node)
        return path

    def to_dict(self) -> dict[str, Any]:
        """Flat-array JSON form."""
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "missing_left": self.missing_left.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "count": self.count.tolist(),
            "value": self.value.tolist(),
            "leaf_id": self.leaf_id.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Tree:
        """Inverse of :meth:`to_dict`."""
        tree = cls(
            feature=np.asarray(data["feature"], dtype=np.int64),
            threshold=np.asarray(data["threshold"], dtype=np.float64),
            missing_left=np.asarray(data["missing_left"], dtype=bool),
            left=np.asarray(data["left"], dtype=np.int64),
            right=np.asarray(data["right"], dtype=np.int64),
            count=np.asarray(data["count"], dtype=np.int64),
            value=np.asarray(data["value"], dtype=np.float64),
            leaf_id=np.asarray(data["leaf_id"], dtype=np.int64),
        )
        n = tree.n_nodes
        for name in ("threshold", "missing_left", "left", "right", "count", "leaf_id"):
            if getattr(tree, name).shape != (n,):
                raise ForestError(f"tree array '{name}' does not match {n} nodes")
        if tree.value.ndim != 2 or tree.value.shape[0] != n:
            raise ForestError(f"tree 'value' must have {n} rows")
        return tree


@dataclass(frozen=True, eq=False)
class Forest:
    """Trained ensemble; immutable and safe to share between threads."""

    trees: tuple[Tree, ...]
    n_classes: int
    n_features: int
    params: ForestParams

    @property
    def n_trees(self) -> int:
        """Number of trees."""
        return len(self.trees)

    def as_instance(self, x: np.ndarray | list[float]) -> np.ndarray:
        arr = np.asarray(x, dtype=np.float64)
        if arr.shape != (self.n_features,):
            raise ForestError(
                f"instance has shape {arr.shape}, expected ({self.n_features},)"
            )
        return arr

    def as_matrix(self, X: np.ndarray) -> np.ndarray:
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != self.n_features:
            raise ForestError(
                f"matrix has shape {arr.shape}, expected (n, {self.n_features})"
            )
        return arr

    def leaf_ids(self, x: np.ndarray | list[float]) -> np.ndarray:
        """Length-``T`` vector of the leaf id reached in each tree."""
        arr = self.as_instance(x)[None, :]
        return np.array([tree.leaf_id[tree.apply(arr)[0]] for tree in self.trees])

    def apply_leaf_ids(self, X: np.ndarray) -> np.ndarray:
        """``n x T`` matrix of leaf ids for every row of *X*."""
        arr = self.as_matrix(X)
        out = np.empty((arr.shape[0], self.n_trees), dtype=np.int64)
        for t, tree in enumerate(self.trees):
            out[:, t] = tree.leaf_id[tree.apply(arr)]
        return out

    def leaf_distributions(self, leaf_ids: np.ndarray) -> np.ndarray:
        """``T x c`` class distributions of the given per-tree leaves."""
        rows = []
        for tree, leaf in zip(self.trees, leaf_ids, strict=True):
            node = int(np.flatnonzero(tree.leaf_id == leaf)[0])
            rows.append(tree.value[node])
        return np.stack(rows)

    def probabilities_from_leaves(self, leaf_ids: np.ndarray) -> np.ndarray:
        """Average of the leaf distributions named by *leaf_ids*."""
        return self.leaf_distributions(leaf_ids).mean(axis=0)

    def predict(self, x: np.ndarray | list[float]) -> tuple[int, np.ndarray]:
        """Predict one instance.

        Returns:
            ``(label, probabilities)``; the label is the argmax with ties going
            to the lower class index.

        Raises:
            ForestError: If the instance length differs from ``n_features``.
        """
        probabilities = self.probabilities_from_leaves(self.leaf_ids(x))
        return int(np.argmax(probabilities)), probabilities

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """``n x c`` class probabilities for every row of *X*."""
        arr = self.as_matrix(X)
        stacked = np.stack([tree.value[tree.apply(arr)] for tree in self.trees])
        return stacked.mean(axis=0)

    def predict_labels(self, X: np.ndarray) -> np.ndarray:
        """Predicted class index for every row of *X*."""
        return np.argmax(self.predict_proba(X), axis=1)

    def root_prior(self, target_class: int) -> float:
        """Mean over trees of the root distribution at *target_class*."""
        return float(np.mean([tree.value[0, target_class] for tree in self.trees]))

    def to_dict(self) -> dict[str, Any]:
        """Versioned JSON document."""
        return {
            "format": FOREST_FORMAT,
            "version": FOREST_FORMAT_VERSION,
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "params": self.params.model_dump(),
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Forest:
        """Rebuild a forest from :meth:`to_dict` output.

        Raises:
            ForestError: If the format tag, version or array shapes are wrong.
        """
        if data.get("format") != FOREST_FORMAT:
            raise ForestError(f"not a forest document (format={data.get('format')!r})")
        if data.get("version") != FOREST_FORMAT_VERSION:
            raise ForestError(
                f"unsupported forest version {data.get('version')!r}, "
                f"expected {FOREST_FORMAT_VERSION}"
            )
        try:
            trees = tuple(Tree.from_dict(tree) for tree in data["trees"])
            forest = cls(
                trees=trees,
                n_classes=int(data["n_classes"]),
                n_features=int(data["n_features"]),
                params=ForestParams(**data["params"]),
            )
        except (KeyError, TypeError, ValidationError) as e:
            raise ForestError(f"malformed forest document: {e}") from e
        if not trees:
            raise ForestError("forest document has no trees")
        for tree in trees:
            if tree.value.shape[1] != forest.n_classes:
                raise ForestError("tree distributions do not match n_classes")
            if (tree.feature >= forest.n_features).any():
                raise ForestError("tree references a feature index >= n_features")
        return forest


def save_forest(forest: Forest, path: str | Path) -> Path:
    """Write *forest* as JSON; floats are written at full precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(forest.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Saved forest (%d trees) to %s", forest.n_trees, path)
    return path


def load_forest(path: str | Path) -> Forest:
    """Read a forest written by :func:`save_forest`."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ForestError(f"forest file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ForestError(f"forest file {path} is not valid JSON: {e}") from e
    return Forest.from_dict(data)


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------


def _best_split(
    X: np.ndarray,
    y: np.ndarray,
    rows: np.ndarray,
    features: np.ndarray,
    n_classes: int,
    min_leaf: int,
) -> tuple[int, float, bool] | None:
    """Best Gini split over *features*; ties go to the lower feature, then threshold."""
    best_score = -np.inf
    best: tuple[int, float, bool] | None = None
    y_rows = y[rows]
    for feature in np.sort(features):
        column = X[rows, feature]
        missing = np.isnan(column)
        present = ~missing
        if present.sum() < 2:
            continue
        order = np.argsort(column[present], kind="stable")
        values = column[present][order]
        classes = y_rows[present][order]
        positions = np.flatnonzero(values[:-1] < values[1:])
        if positions.size == 0:
            continue

        onehot = np.zeros((values.size, n_classes))
        onehot[np.arange(values.size), classes] = 1.0
        cumulative = np.cumsum(onehot, axis=0)
        missing_counts = np.bincount(y_rows[missing], minlength=n_classes).astype(np.float64)

        left_counts = cumulative[positions]
        right_counts = cumulative[-1] - left_counts
        n_left = positions + 1
        n_right = values.size - n_left
        missing_left = n_left >= n_right
        left_counts = left_counts + np.where(missing_left[:, None], missing_counts, 0.0)
        right_counts = right_counts + np.where(missing_left[:, None], 0.0, missing_counts)
        left_total = left_counts.sum(axis=1)
        right_total = right_counts.sum(axis=1)

        valid = (left_total >= min_leaf) & (right_total >= min_leaf)
        if not valid.any():
            continue
        # Maximizing this is equivalent to minimizing the weighted child Gini.
        score = np.where(
            valid,
            (left_counts**2).sum(axis=1) / np.maximum(left_total, 1.0)
            + (right_counts**2).sum(axis=1) / np.maximum(right_total, 1.0),
            -np.inf,
        )
        i = int(np.argmax(score))
        if score[i] > best_score:
            low, high = values[positions[i]], values[positions[i] + 1]
            threshold = (low + high) / 2.0
            if not low <= threshold < high:
                threshold = low
            best_score = score[i]
            best = (int(feature), float(threshold), bool(missing_left[i]))
    return best


class _TreeBuilder:
    """Grows one tree into flat lists."""

    def __init__(
        self,
        X: np.ndarray,
        y: np.ndarray,
        n_classes: int,
        params: ForestParams,
        rng: np.random.Generator,
    ) -> None:
        self._X = X
        self._y = y
        self._n_classes = n_classes
        self._params = params
        self._mtry = params.resolved_mtry(X.shape[1])
        self._rng = rng
        self._feature: list[int] = []
        self._threshold: list[float] = []
        self._missing_left: list[bool] = []
        self._left: list[int] = []
        self._right: list[int] = []
        self._count: list[int] = []
        self._value: list[np.ndarray] = []
        self._leaf_id: list[int] = []
        self._n_leaves = 0

    def build(self, rows: np.ndarray) -> Tree:
        self._grow(rows, depth=0)
        return Tree(
            feature=np.asarray(self._feature, dtype=np.int64),
            threshold=np.asarray(self._threshold, dtype=np.float64),
            missing_left=np.asarray(self._missing_left, dtype=bool),
            left=np.asarray(self._left, dtype=np.int64),
            right=np.asarray(self._right, dtype=np.int64),
            count=np.asarray(self._count, dtype=np.int64),
            value=np.stack(self._value),
            leaf_id=np.asarray(self._leaf_id, dtype=np.int64),
        )

    def _new_node(self, rows: np.ndarray) -> tuple[int, np.ndarray]:
        counts = np.bincount(self._y[rows], minlength=self._n_classes)
        node = len(self._feature)
        self._feature.append(-1)
        self._threshold.append(0.0)
        self._missing_left.append(True)
        self._left.append(-1)
        self._right.append(-1)
        self._count.append(int(rows.size))
        self._value.append(counts / rows.size)
        self._leaf_id.append(-1)
        return node, counts

    def _make_leaf(self, node: int) -> int:
        self._leaf_id[node] = self._n_leaves
        self._n_leaves += 1
        return node

    def _grow(self, rows: np.ndarray, depth: int) -> int:
        node, counts = self._new_node(rows)
        min_leaf = self._params.min_leaf
        if (
            depth >= self._params.max_depth
            or rows.size < 2 * min_leaf
            or np.count_nonzero(counts) <= 1
        ):
            return self._make_leaf(node)

        features = self._rng.choice(self._X.shape[1], size=self._mtry, replace=False)
        split = _best_split(self._X, self._y, rows, features, self._n_classes, min_leaf)
        if split is None:
            return self._make_leaf(node)

        feature, threshold, missing_left = split
        column = self._X[rows, feature]
        go_left = np.where(np.isnan(column), missing_left, column <= threshold)
        self._feature[node] = feature
        self._threshold[node] = threshold
        self._missing_left[node] = missing_left
        self._left[node] = self._grow(rows[go_left], depth + 1)
        self._right[node] = self._grow(rows[~go_left], depth + 1)
        return node


def _fit_tree(
    X: np.ndarray, y: np.ndarray, n_classes: int, params: ForestParams, tree_index: int
) -> Tree:
    """Fit tree *tree_index* on its bootstrap sample; its stream depends only on (seed, index)."""
    rng = np.random.default_rng([params.seed, tree_index])
    n = X.shape[0]
    sample = rng.integers(0, n, size=n)
    Xb, yb = X[sample], y[sample]
    return _TreeBuilder(Xb, yb, n_classes, params, rng).build(np.arange(n))


def _check_params(ds: Dataset, params: ForestParams) -> None:
    if params.seed < 0:
        raise ForestError(f"seed must be >= 0, got {params.seed}")
    if params.n_trees < 1:
        raise ForestError(f"n_trees must be >= 1, got {params.n_trees}")
    if params.max_depth < 1:
        raise ForestError(f"max_depth must be >= 1, got {params.max_depth}")
    if params.min_leaf < 1:
        raise ForestError(f"min_leaf must be >= 1, got {params.min_leaf}")
    mtry = params.resolved_mtry(ds.n_features)
    if not 1 <= mtry <= ds.n_features:
        raise ForestError(f"mtry must lie in [1, {ds.n_features}], got {mtry}")
    if ds.n_instances < params.min_leaf:
        raise ForestError(
            f"dataset has {ds.n_instances} row(s), fewer than min_leaf={params.min_leaf}"
        )


def train(ds: Dataset, params: ForestParams | None = None, n_jobs: int = 1) -> Forest:
    """Train a random forest on *ds*.

    Each tree is fit on a bootstrap sample of size ``n``; at every split ``mtry``
    features are sampled without replacement. Trees may be fit in parallel; the
    result is identical for any *n_jobs* because each tree's random stream is
    derived from ``(seed, tree index)``.

    Raises:
        ForestError: If parameters are out of range for *ds*.
    """
    params = params or ForestParams()
    _check_params(ds, params)
    X = np.asarray(ds.features)
    y = np.asarray(ds.labels)
    logger.info(
        "Training forest: %d trees, max_depth=%d, min_leaf=%d, mtry=%d, seed=%d on %d x %d",
        params.n_trees,
        params.max_depth,
        params.min_leaf,
        params.resolved_mtry(ds.n_features),
        params.seed,
        ds.n_instances,
        ds.n_features,
    )
    trees = Parallel(n_jobs=n_jobs)(
        delayed(_fit_tree)(X, y, ds.n_classes, params, t) for t in range(params.n_trees)
    )
    forest = Forest(
        trees=tuple(trees),
        n_classes=ds.n_classes,
        n_features=ds.n_features,
        params=params,
    )
    logger.info(
        "Forest trained: %d leaves in total", sum(tree.n_leaves for tree in forest.trees)
    )
    return forest
