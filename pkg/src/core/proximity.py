"""Tree-space distance: the fraction of trees in which two instances land in different leaves."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from src.core.forest import Forest
from src.data.dataset import Dataset
from src.models.errors import ProximityError
from src.utils.io import write_matrix_csv

logger = logging.getLogger(__name__)

DEFAULT_MAX_MATERIALIZED = 5000


def _disagreement(leaves: np.ndarray, reference: np.ndarray, n_trees: int) -> np.ndarray:
    """Per-row fraction of trees where ``leaves`` differs from ``reference``."""
    return np.count_nonzero(leaves != reference, axis=-1) / n_trees


def tree_distance(forest: Forest, a: np.ndarray, b: np.ndarray) -> float:
    """``(1/T) * #{t : leaf_t(a) != leaf_t(b)}``.

    Raises:
        ForestError: If either instance has the wrong length.
    """
    return float(_disagreement(forest.leaf_ids(a), forest.leaf_ids(b), forest.n_trees))


class DistanceMatrix:
    """Symmetric ``n x n`` tree distances with a zero diagonal.

    Up to ``max_materialized`` instances the whole matrix is held in memory;
    above that cap rows are computed from the cached leaf vectors on demand.
    """

    def __init__(
        self,
        leaves: np.ndarray,
        n_trees: int,
        max_materialized: int = DEFAULT_MAX_MATERIALIZED,
    ) -> None:
        """Build the matrix from an ``n x T`` leaf-id matrix.

        Args:
            leaves: Leaf id reached by every instance in every tree.
            n_trees: Number of trees ``T``.
            max_materialized: Largest ``n`` for which all rows are precomputed.
        """
        self._leaves = np.array(leaves, dtype=np.int64, copy=True)
        self._leaves.flags.writeable = False
        self._n_trees = n_trees
        self._values: np.ndarray | None = None
        n = self._leaves.shape[0]
        if n <= max_materialized:
            values = np.empty((n, n))
            for i in range(n):
                values[i] = _disagreement(self._leaves, self._leaves[i], n_trees)
            values.flags.writeable = False
            self._values = values
        else:
            logger.warning(
                "%d instances exceed the materialization cap of %d; "
                "distance rows are computed on demand",
                n,
                max_materialized,
            )

    @property
    def instance_count(self) -> int:
        """Number of instances ``n``."""
        return self._leaves.shape[0]

    @property
    def is_materialized(self) -> bool:
        """True when every row is held in memory."""
        return self._values is not None

    @property
    def values(self) -> np.ndarray:
        """Full ``n x n`` matrix (computed now if it was not materialized)."""
        if self._values is not None:
            return self._values
        return np.vstack([self.row(i) for i in range(self.instance_count)])

    @property
    def leaves(self) -> np.ndarray:
        """The ``n x T`` leaf-id matrix the distances derive from."""
        return self._leaves

    def _check_index(self, i: int) -> None:
        if not 0 <= i < self.instance_count:
            raise ProximityError(f"index {i} outside [0, {self.instance_count})")

    def row(self, i: int) -> np.ndarray:
        """Distances from instance *i* to every instance."""
        self._check_index(i)
        if self._values is not None:
            return self._values[i]
        return _disagreement(self._leaves, self._leaves[i], self._n_trees)

    def block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Sub-matrix ``D[rows][:, cols]``."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if self._values is not None:
            return self._values[np.ix_(rows, cols)]
        out = np.empty((rows.size, cols.size))
        for k, c in enumerate(cols):
            # Symmetry lets each column be read as a row.
            out[:, k] = self.row(int(c))[rows]
        return out

    def __getitem__(self, key: tuple[int, int]) -> float:
        i, j = key
        self._check_index(j)
        return float(self.row(i)[j])


def distance_matrix(
    forest: Forest, ds: Dataset, max_materialized: int = DEFAULT_MAX_MATERIALIZED
) -> DistanceMatrix:
    """Pairwise tree distances over *ds*; leaf vectors are computed once per instance."""
    leaves = forest.apply_leaf_ids(ds.features)
    logger.info("Computed leaf vectors for %d instances x %d trees", *leaves.shape)
    return DistanceMatrix(leaves, forest.n_trees, max_materialized=max_materialized)


def cross_distances(forest: Forest, queries: np.ndarray, references: np.ndarray) -> np.ndarray:
    """``len(queries) x len(references)`` tree distances between two row sets."""
    query_leaves = forest.apply_leaf_ids(queries)
    reference_leaves = forest.apply_leaf_ids(references)
    out = np.empty((query_leaves.shape[0], reference_leaves.shape[0]))
    for i, leaves in enumerate(query_leaves):
        out[i] = _disagreement(reference_leaves, leaves, forest.n_trees)
    return out


def export_distance_matrix(matrix: DistanceMatrix, path: str | Path) -> Path:
    """Write the full matrix as a headerless CSV."""
    return write_matrix_csv(Path(path), matrix.values)
