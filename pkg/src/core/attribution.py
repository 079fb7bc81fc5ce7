"""Per-instance feature attributions and their squared-share normalization.

Three providers fill an :class:`AttributionMatrix`:

* ``path`` - tree-path contributions (default; exact efficiency, linear in depth).
* ``exact-shapley`` - interventional Shapley values by enumerating all coalitions;
  only for small ``d``.
* ``imported`` - scores computed elsewhere and read from a headerless CSV.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

from src.core.forest import Forest
from src.data.dataset import Dataset
from src.models.errors import AttributionError
from src.utils.io import write_matrix_csv

logger = logging.getLogger(__name__)

# Exact enumeration visits 2^d coalitions.
MAX_EXACT_FEATURES = 15


class AttributionProvider(str, Enum):
    """Source of the raw attribution scores."""

    PATH = "path"
    EXACT_SHAPLEY = "exact-shapley"
    IMPORTED = "imported"


@dataclass(frozen=True, eq=False)
class AttributionMatrix:
    """Raw scores and their normalized simplex rows.

    Attributes:
        raw: ``n x d`` raw attribution scores.
        normalized: ``n x d`` rows from :func:`normalize`.
        provider: Which provider produced ``raw``.
        target_classes: Class explained by each row; ``None`` for imported scores.
    """

    raw: np.ndarray
    normalized: np.ndarray
    provider: AttributionProvider
    target_classes: np.ndarray | None = None

    def __post_init__(self) -> None:
        for name in ("raw", "normalized"):
            arr = np.array(getattr(self, name), dtype=np.float64, copy=True)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.raw.shape != self.normalized.shape or self.raw.ndim != 2:
            raise AttributionError(
                f"raw {self.raw.shape} and normalized {self.normalized.shape} must be equal 2-D"
            )

    @property
    def n_instances(self) -> int:
        """Row count."""
        return self.raw.shape[0]

    @property
    def n_features(self) -> int:
        """Column count."""
        return self.raw.shape[1]

    @cached_property
    def fi_matrix(self) -> np.ndarray:
        """``n x n`` inner products of normalized rows, computed once."""
        fi = self.normalized @ self.normalized.T
        fi.flags.writeable = False
        return fi

    def fi_block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Inner products of normalized *rows* with normalized *cols*; nothing is cached."""
        return np.einsum(
            "ik,jk->ij", self.normalized[np.asarray(rows)], self.normalized[np.asarray(cols)]
        )

    @classmethod
    def from_raw(
        cls,
        raw: np.ndarray,
        provider: AttributionProvider,
        target_classes: np.ndarray | None = None,
    ) -> AttributionMatrix:
        """Normalize every row of *raw* and wrap the result."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2:
            raise AttributionError(f"raw attributions must be 2-D, got shape {raw.shape}")
        normalized = np.vstack([normalize(row) for row in raw]) if raw.shape[0] else raw.copy()
        fallback = int((np.abs(raw).max(axis=1) == 0).sum()) if raw.shape[0] else 0
        if fallback:
            logger.warning("%d attribution row(s) are all zero; using uniform weights", fallback)
        return cls(raw=raw, normalized=normalized, provider=provider, target_classes=target_classes)


def normalize(phi: np.ndarray | list[float]) -> np.ndarray:
    """Squared share of every feature: ``phi_l^2 / sum_k phi_k^2``.

    An all-zero vector maps to the uniform vector ``(1/d, ..., 1/d)``.

    Raises:
        AttributionError: If any entry is not finite or the vector is empty.
    """
    arr = np.asarray(phi, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise AttributionError(f"expected a non-empty vector, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise AttributionError("attribution vector contains non-finite entries")
    peak = np.abs(arr).max()
    if peak == 0.0:
        return np.full(arr.size, 1.0 / arr.size)
    # Rescaling by the peak keeps squares away from underflow/overflow.
    squared = (arr / peak) ** 2
    return squared / squared.sum()


def _check_target(forest: Forest, target_class: int) -> None:
    if not 0 <= target_class < forest.n_classes:
        raise AttributionError(
            f"target_class {target_class} outside [0, {forest.n_classes})"
        )


def path_contributions(forest: Forest, x: np.ndarray, target_class: int) -> np.ndarray:
    """Tree-path decomposition of the target-class probability.

    Every split on the path credits ``child[target] - parent[target]`` to its
    feature; contributions are averaged over trees, so their sum equals the
    predicted probability minus the mean root prior.

    Raises:
        AttributionError: If *target_class* is invalid.
        ForestError: If *x* has the wrong length.
    """
    _check_target(forest, target_class)
    arr = forest.as_instance(x)
    phi = np.zeros(forest.n_features)
    for tree in forest.trees:
        path = tree.decision_path(arr)
        for parent, child in zip(path[:-1], path[1:]):
            phi[tree.feature[parent]] += (
                tree.value[child, target_class] - tree.value[parent, target_class]
            )
    return phi / forest.n_trees


def _shapley_kernel(d: int) -> np.ndarray:
    """Weight ``|S|! (d - |S| - 1)! / d!`` indexed by coalition size."""
    return np.array(
        [math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) for s in range(d)]
    )


def coalition_values(
    forest: Forest, x: np.ndarray, background: Dataset, target_class: int
) -> np.ndarray:
    """Value of every coalition, indexed by bitmask (bit ``l`` set = feature ``l`` from *x*)."""
    d = forest.n_features
    base = np.array(background.features, dtype=np.float64)
    values = np.empty(1 << d)
    for mask in range(1 << d):
        hybrid = base.copy()
        on = [feat for feat in range(d) if mask >> feat & 1]
        if on:
            hybrid[:, on] = x[on]
        values[mask] = forest.predict_proba(hybrid)[:, target_class].mean()
    return values


def exact_shapley(
    forest: Forest, x: np.ndarray, background: Dataset, target_class: int
) -> np.ndarray:
    """Interventional Shapley values by full coalition enumeration.

    ``v(S)`` is the mean target probability over *background* rows with the
    features in ``S`` taken from *x*; off-coalition features keep the background
    value, missing markers included.

    Raises:
        AttributionError: If ``d`` exceeds :data:`MAX_EXACT_FEATURES`, the background
            is empty or the target class is invalid.
    """
    d = forest.n_features
    if d > MAX_EXACT_FEATURES:
        raise AttributionError(
            f"exact Shapley enumeration supports d <= {MAX_EXACT_FEATURES}, got d={d}"
        )
    if background.n_instances == 0:
        raise AttributionError("background dataset is empty")
    if background.n_features != d:
        raise AttributionError(
            f"background has {background.n_features} features, forest expects {d}"
        )
    _check_target(forest, target_class)
    arr = forest.as_instance(x)

    values = coalition_values(forest, arr, background, target_class)
    kernel = _shapley_kernel(d)
    sizes = np.array([bin(mask).count("1") for mask in range(1 << d)])
    phi = np.zeros(d)
    for feat in range(d):
        bit = 1 << feat
        without = np.array([mask for mask in range(1 << d) if not mask & bit])
        phi[feat] = np.sum(kernel[sizes[without]] * (values[without | bit] - values[without]))
    return phi


def sample_background(ds: Dataset, size: int, seed: int) -> Dataset:
    """Deterministic background sample of at most *size* rows."""
    if size >= ds.n_instances:
        return ds
    rng = np.random.default_rng(seed)
    return ds.subset(np.sort(rng.choice(ds.n_instances, size=size, replace=False)))


def compute_attributions(
    forest: Forest,
    ds: Dataset,
    provider: AttributionProvider | str = AttributionProvider.PATH,
    target_class: int | None = None,
    background: Dataset | None = None,
) -> AttributionMatrix:
    """Attribute every row of *ds*.

    Args:
        forest: Black-box model.
        ds: Instances to explain.
        provider: ``path`` or ``exact-shapley``.
        target_class: Class whose probability is explained; ``None`` explains each
            instance's predicted class.
        background: Background rows for ``exact-shapley``.

    Raises:
        AttributionError: For the ``imported`` provider (use
            :func:`import_attributions`) or a missing background.
    """
    provider = AttributionProvider(provider)
    if provider is AttributionProvider.IMPORTED:
        raise AttributionError("imported attributions are read with import_attributions()")
    if provider is AttributionProvider.EXACT_SHAPLEY and background is None:
        raise AttributionError("exact-shapley attributions need a background dataset")

    if target_class is None:
        targets = forest.predict_labels(ds.features)
    else:
        _check_target(forest, target_class)
        targets = np.full(ds.n_instances, target_class, dtype=np.int64)

    raw = np.empty((ds.n_instances, ds.n_features))
    for i in range(ds.n_instances):
        if provider is AttributionProvider.PATH:
            raw[i] = path_contributions(forest, ds.features[i], int(targets[i]))
        else:
            raw[i] = exact_shapley(forest, ds.features[i], background, int(targets[i]))
    logger.info(
        "Computed %s attributions for %d instances", provider.value, ds.n_instances
    )
    return AttributionMatrix.from_raw(raw, provider, target_classes=targets)


def import_attributions(
    path: str | Path, expected_n: int, expected_d: int
) -> AttributionMatrix:
    """Read a headerless CSV of raw scores (row = instance, column = feature).

    Raises:
        AttributionError: If the file is missing, a cell is not a finite real, or
            the shape differs from ``expected_n x expected_d``.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise AttributionError(f"attribution file not found: {path}") from e
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise AttributionError(f"failed to read attribution file {path}: {e}") from e

    if frame.shape != (expected_n, expected_d):
        raise AttributionError(
            f"attribution file {path} has shape {frame.shape[0]} x {frame.shape[1]}, "
            f"expected {expected_n} x {expected_d}"
        )
    raw = np.empty(frame.shape)
    for (row, col), cell in np.ndenumerate(frame.to_numpy()):
        try:
            value = float(cell)
        except ValueError as e:
            raise AttributionError(
                f"non-numeric attribution {cell!r} at row {row + 1}, column {col + 1} of {path}"
            ) from e
        if not math.isfinite(value):
            raise AttributionError(
                f"non-finite attribution {cell!r} at row {row + 1}, column {col + 1} of {path}"
            )
        raw[row, col] = value
    logger.info("Imported %d x %d attributions from %s", expected_n, expected_d, path)
    return AttributionMatrix.from_raw(raw, AttributionProvider.IMPORTED)


def export_attributions(matrix: AttributionMatrix, directory: str | Path, prefix: str) -> None:
    """Write ``<prefix>_raw.csv`` and ``<prefix>_normalized.csv`` into *directory*."""
    directory = Path(directory)
    write_matrix_csv(directory / f"{prefix}_raw.csv", matrix.raw)
    write_matrix_csv(directory / f"{prefix}_normalized.csv", matrix.normalized)
