"""Alike parts: the features an instance and its nearest prototype both rely on.

For instance ``i`` with nearest prototype ``j`` the weight of feature ``l`` is
``u_l * v_l`` (the product of their normalized attributions); the mask keeps the
features whose weight is strictly above the mean weight.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from src.core.attribution import AttributionMatrix
from src.core.proximity import DistanceMatrix
from src.core.selection import CostModel
from src.data.dataset import Dataset
from src.models.errors import ExplanationError, SelectionError
from src.models.records import AlikeExplanation, AssignmentMetric, PrototypeSet
from src.utils.io import format_real, write_jsonl

logger = logging.getLogger(__name__)


def alike_weights(u_hat: np.ndarray | list[float], v_hat: np.ndarray | list[float]) -> np.ndarray:
    """Element-wise product ``w_l = u_l * v_l`` of two normalized attribution vectors.

    Raises:
        ExplanationError: If the vectors differ in length.
    """
    u = np.asarray(u_hat, dtype=np.float64)
    v = np.asarray(v_hat, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ExplanationError(f"weight vectors must match, got {u.shape} and {v.shape}")
    return u * v


def alike_mask(w: np.ndarray | list[float]) -> np.ndarray:
    """Binary mask with ``m_l = 1`` iff ``w_l`` is strictly above the mean of *w*.

    A constant vector yields the all-zero mask.
    """
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ExplanationError(f"expected a non-empty weight vector, got shape {arr.shape}")
    if (arr == arr[0]).all():
        return np.zeros(arr.size, dtype=np.int64)
    return (arr > arr.sum() / arr.size).astype(np.int64)


def nearest_prototype(
    costs: np.ndarray, prototype_indices: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pick the cheapest prototype for every row of *costs*.

    Args:
        costs: ``m x |P|`` assignment costs, columns in prototype-set order.
        prototype_indices: Instance index of every column.

    Returns:
        The chosen column per row and its cost; ties go to the lowest instance index.
    """
    order = np.argsort(prototype_indices, kind="stable")
    ordered = costs[:, order]
    picks = np.argmin(ordered, axis=1)
    return order[picks], ordered[np.arange(costs.shape[0]), picks]


def _build(
    instance_index: int,
    u_hat: np.ndarray,
    v_hat: np.ndarray,
    prototype_index: int,
    prototype_label: int,
    cost: float,
    metric: AssignmentMetric,
    provider: str,
) -> AlikeExplanation:
    weights = alike_weights(u_hat, v_hat)
    mask = alike_mask(weights)
    return AlikeExplanation(
        instance_index=instance_index,
        prototype_index=prototype_index,
        prototype_label=prototype_label,
        weights=weights.tolist(),
        mask=mask.tolist(),
        assignment_cost=float(cost),
        alike_importance=float(np.dot(mask, u_hat)),
        metric_used=metric,
        provider=provider,
    )


def _check_prototypes(P: PrototypeSet) -> np.ndarray:
    if len(P) == 0:
        raise ExplanationError("prototype set is empty")
    return np.asarray(P.indices, dtype=np.int64)


def _training_costs(
    rows: np.ndarray,
    protos: np.ndarray,
    D: DistanceMatrix,
    A: AttributionMatrix,
    beta: float,
    metric: AssignmentMetric,
) -> np.ndarray:
    if A.n_instances != D.instance_count:
        raise ExplanationError(
            f"attributions cover {A.n_instances} instances, distances {D.instance_count}"
        )
    if metric is AssignmentMetric.DISTANCE_ONLY:
        return D.block(rows, protos)
    try:
        return CostModel(D, A, beta).block(rows, protos)
    except SelectionError as e:
        raise ExplanationError(str(e)) from e


def explain_instance(
    i: int,
    P: PrototypeSet,
    D: DistanceMatrix,
    A: AttributionMatrix,
    beta: float,
    metric: AssignmentMetric | str = AssignmentMetric.COMBINED,
) -> AlikeExplanation:
    """Explain training instance *i* by its nearest prototype in *P*.

    Args:
        i: Row of the instance in the matrices.
        P: Prototypes (indices into the same matrices).
        D: Tree distances.
        A: Attributions; rows must exist for *i* and every prototype.
        beta: Weight of the fi term under the combined metric.
        metric: ``combined`` (``D + beta * fi``) or ``distance-only``.

    Raises:
        ExplanationError: If *P* is empty or an index has no attribution row.
    """
    metric = AssignmentMetric(metric)
    protos = _check_prototypes(P)
    for index in (i, *protos):
        if not 0 <= index < A.n_instances:
            raise ExplanationError(f"no attribution row for instance {int(index)}")
    costs = _training_costs(np.array([i]), protos, D, A, beta, metric)
    cols, best = nearest_prototype(costs, protos)
    col = int(cols[0])
    return _build(
        i,
        A.normalized[i],
        A.normalized[protos[col]],
        int(protos[col]),
        P.labels[col],
        best[0],
        metric,
        A.provider.value,
    )


@dataclass(frozen=True)
class AlikeReport:
    """Explanations of a batch of instances plus per-feature highlight rates.

    Attributes:
        explanations: One explanation per instance, in row order.
        frequencies: Fraction of explanations whose mask selects each feature.
        feature_names: Column names aligned with ``frequencies``.
    """

    explanations: list[AlikeExplanation]
    frequencies: list[float]
    feature_names: list[str]

    @property
    def mean_mask_length(self) -> float:
        """Average number of features per alike part."""
        return float(np.mean([e.mask_length for e in self.explanations]))

    @property
    def mean_alike_importance(self) -> float:
        """Average normalized importance of the explained instance within its alike part."""
        return float(np.mean([e.alike_importance for e in self.explanations]))

    def frequency_table(self) -> pd.DataFrame:
        """Frequencies as a two-column frame: ``feature_name``, ``highlight_fraction``."""
        return pd.DataFrame(
            {"feature_name": self.feature_names, "highlight_fraction": self.frequencies}
        )


def _report(explanations: list[AlikeExplanation], feature_names: list[str]) -> AlikeReport:
    masks = np.array([e.mask for e in explanations], dtype=np.int64)
    frequencies = masks.mean(axis=0) if len(explanations) else np.zeros(len(feature_names))
    logger.info(
        "Explained %d instances; %d without a distinguishing alike part",
        len(explanations),
        sum(1 for e in explanations if not e.has_alike_part),
    )
    return AlikeReport(
        explanations=explanations,
        frequencies=[float(f) for f in frequencies],
        feature_names=list(feature_names),
    )


def explain_all(
    ds: Dataset,
    P: PrototypeSet,
    D: DistanceMatrix,
    A: AttributionMatrix,
    beta: float,
    metric: AssignmentMetric | str = AssignmentMetric.COMBINED,
) -> AlikeReport:
    """Explain every instance of *ds* (the dataset *D* and *A* were built on)."""
    metric = AssignmentMetric(metric)
    protos = _check_prototypes(P)
    if ds.n_instances != D.instance_count:
        raise ExplanationError(
            f"dataset has {ds.n_instances} rows, distance matrix {D.instance_count}"
        )
    if int(protos.max()) >= A.n_instances:
        raise ExplanationError(f"no attribution row for prototype {int(protos.max())}")
    rows = np.arange(ds.n_instances)
    cols, best = nearest_prototype(_training_costs(rows, protos, D, A, beta, metric), protos)
    explanations = [
        _build(
            int(i),
            A.normalized[i],
            A.normalized[protos[col]],
            int(protos[col]),
            P.labels[col],
            cost,
            metric,
            A.provider.value,
        )
        for i, col, cost in zip(rows, cols, best)
    ]
    return _report(explanations, ds.feature_names)


def query_costs(
    prototype_distances: np.ndarray,
    protos: np.ndarray,
    A_query: AttributionMatrix | None,
    A_reference: AttributionMatrix | None,
    beta: float,
    metric: AssignmentMetric,
) -> np.ndarray:
    """``m x |P|`` assignment costs of queries against prototypes.

    Args:
        prototype_distances: Tree distances from every query to every prototype.
        protos: Training index of every prototype column.
        A_query: Attributions of the queries.
        A_reference: Attributions of the training instances.
        beta: Weight of the fi term.
        metric: ``distance-only`` ignores the attributions.

    Raises:
        ExplanationError: If attributions are missing under the combined metric.
    """
    if metric is AssignmentMetric.DISTANCE_ONLY:
        return prototype_distances
    if A_query is None or A_reference is None:
        raise ExplanationError("the combined metric needs query and reference attributions")
    if A_query.n_instances != prototype_distances.shape[0]:
        raise ExplanationError(
            f"{A_query.n_instances} query attribution rows for "
            f"{prototype_distances.shape[0]} queries"
        )
    if int(protos.max()) >= A_reference.n_instances:
        raise ExplanationError(f"no attribution row for prototype {int(protos.max())}")
    if beta == 0.0:
        return prototype_distances
    return prototype_distances + beta * (A_query.normalized @ A_reference.normalized[protos].T)


def explain_queries(
    query_distances: np.ndarray,
    P: PrototypeSet,
    A_query: AttributionMatrix,
    A_reference: AttributionMatrix,
    beta: float,
    metric: AssignmentMetric | str,
    feature_names: list[str],
) -> AlikeReport:
    """Explain instances outside the distance matrix, e.g. a test set.

    Args:
        query_distances: ``m x n_train`` tree distances from every query to every
            training instance (see :func:`src.core.proximity.cross_distances`).
        P: Prototypes as training indices.
        A_query: Attributions of the queries.
        A_reference: Attributions of the training instances.
        beta: Weight of the fi term under the combined metric.
        metric: Assignment metric.
        feature_names: Column names for the frequency table.

    Raises:
        ExplanationError: If *P* is empty or the inputs disagree in shape.
    """
    metric = AssignmentMetric(metric)
    protos = _check_prototypes(P)
    distances = np.asarray(query_distances, dtype=np.float64)
    if distances.ndim != 2 or distances.shape[0] != A_query.n_instances:
        raise ExplanationError(
            f"query distances {distances.shape} do not match {A_query.n_instances} queries"
        )
    if distances.shape[1] != A_reference.n_instances or int(protos.max()) >= distances.shape[1]:
        raise ExplanationError("prototype indices fall outside the reference attributions")
    costs = query_costs(distances[:, protos], protos, A_query, A_reference, beta, metric)
    cols, best = nearest_prototype(costs, protos)
    explanations = [
        _build(
            q,
            A_query.normalized[q],
            A_reference.normalized[protos[col]],
            int(protos[col]),
            P.labels[col],
            cost,
            metric,
            A_query.provider.value,
        )
        for q, (col, cost) in enumerate(zip(cols, best))
    ]
    return _report(explanations, feature_names)


def write_explanations(report: AlikeReport, path: str | Path) -> Path:
    """One JSON object per explanation, weights at full precision."""
    return write_jsonl(Path(path), report.explanations)


def write_frequencies(report: AlikeReport, path: str | Path) -> Path:
    """CSV with header ``feature_name,highlight_fraction``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = report.frequency_table()
    table["highlight_fraction"] = table["highlight_fraction"].map(format_real)
    table.to_csv(path, index=False)
    return path


def prototype_table(
    P: PrototypeSet,
    A: AttributionMatrix,
    feature_names: list[str] | tuple[str, ...],
    class_names: list[str] | tuple[str, ...],
) -> pd.DataFrame:
    """Normalized attributions of every prototype, one row per prototype in selection order.

    Columns are ``prototype_index``, ``label`` (class name) and one column per feature.
    """
    indices = _check_prototypes(P)
    if indices.size and indices.max() >= A.n_instances:
        raise ExplanationError(
            f"prototype index {int(indices.max())} outside attributions of {A.n_instances} rows"
        )
    if len(feature_names) != A.n_features:
        raise ExplanationError(
            f"expected {A.n_features} feature names, got {len(feature_names)}"
        )
    table = pd.DataFrame(A.normalized[indices], columns=list(feature_names))
    table.insert(0, "label", [class_names[label] for label in P.labels], allow_duplicates=True)
    table.insert(0, "prototype_index", indices, allow_duplicates=True)
    return table


def write_prototype_table(table: pd.DataFrame, path: str | Path) -> Path:
    """CSV of :func:`prototype_table` with attributions at full precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = table.copy()
    for column in table.columns[2:]:
        table[column] = table[column].map(format_real)
    table.to_csv(path, index=False)
    return path
