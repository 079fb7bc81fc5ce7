"""1-nearest-prototype surrogate and its accuracy against the black-box model."""

from __future__ import annotations

import logging

import numpy as np

from src.core.alike import nearest_prototype, query_costs
from src.core.attribution import AttributionMatrix
from src.core.forest import Forest
from src.core.proximity import cross_distances
from src.data.dataset import Dataset
from src.models.errors import ExplanationError
from src.models.records import AssignmentMetric, EvaluationReport, PrototypeSet

logger = logging.getLogger(__name__)


def surrogate_predict(
    P: PrototypeSet,
    prototype_distances: np.ndarray,
    A_query: AttributionMatrix | None,
    A_train: AttributionMatrix | None,
    beta: float,
    metric: AssignmentMetric | str,
) -> np.ndarray:
    """Label of the nearest prototype for every query row.

    Args:
        P: Prototype set; its labels are the black-box predictions of the prototypes.
        prototype_distances: ``m x |P|`` tree distances, columns in ``P`` order.
        A_query: Attributions of the queries (combined metric only).
        A_train: Attributions of the training instances (combined metric only).
        beta: Weight of the fi term.
        metric: Assignment metric.
    """
    if len(P) == 0:
        raise ExplanationError("prototype set is empty")
    protos = np.asarray(P.indices, dtype=np.int64)
    costs = query_costs(
        prototype_distances, protos, A_query, A_train, beta, AssignmentMetric(metric)
    )
    cols, _ = nearest_prototype(costs, protos)
    return np.asarray(P.labels, dtype=np.int64)[cols]


def confusion_matrix(reference: np.ndarray, predicted: np.ndarray, n_classes: int) -> np.ndarray:
    """``n_classes x n_classes`` counts; rows are *reference*, columns *predicted*."""
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (reference, predicted), 1)
    return confusion


def evaluate_surrogate(
    P: PrototypeSet,
    train: Dataset,
    test: Dataset,
    forest: Forest,
    A_train: AttributionMatrix | None,
    A_test: AttributionMatrix | None,
    beta: float,
    metric: AssignmentMetric | str = AssignmentMetric.COMBINED,
    query_distances: np.ndarray | None = None,
) -> EvaluationReport:
    """Classify *test* by its nearest prototype and compare with the black box.

    ``accuracy`` is the fidelity to ``forest``'s predictions on *test*;
    ``ground_truth_accuracy`` uses the dataset labels instead.

    Args:
        P: Prototypes (indices into *train*).
        train: Training set the prototypes come from.
        test: Held-out instances.
        forest: The black-box model.
        A_train: Training attributions.
        A_test: Test attributions, same provider and target policy as *A_train*.
        beta: Weight of the fi term under the combined metric.
        metric: Assignment metric.
        query_distances: Optional precomputed ``len(test) x len(train)`` tree distances.

    Raises:
        ExplanationError: If *P* or *test* is empty, or attributions are missing
            under the combined metric.
    """
    if len(P) == 0:
        raise ExplanationError("prototype set is empty")
    if test.n_instances == 0:
        raise ExplanationError("test set is empty")
    protos = np.asarray(P.indices, dtype=np.int64)
    if query_distances is None:
        distances = cross_distances(forest, test.features, train.features[protos])
    else:
        distances = np.asarray(query_distances)[:, protos]

    surrogate = surrogate_predict(P, distances, A_test, A_train, beta, metric)
    model = forest.predict_labels(test.features)
    confusion = confusion_matrix(model, surrogate, forest.n_classes)

    row_totals = confusion.sum(axis=1)
    # Classes the forest never predicts on the test set score 0.0 with zero support.
    per_class = [
        float(confusion[k, k] / row_totals[k]) if row_totals[k] else 0.0
        for k in range(forest.n_classes)
    ]
    report = EvaluationReport(
        accuracy=float(np.trace(confusion) / confusion.sum()),
        ground_truth_accuracy=float(np.mean(surrogate == test.labels)),
        per_class_accuracy=per_class,
        per_class_support=[int(total) for total in row_totals],
        confusion=confusion.tolist(),
        n_prototypes=len(P),
        n_test=test.n_instances,
        config=P.config,
    )
    logger.info(
        "Surrogate with %d prototypes: fidelity %.4f, ground-truth accuracy %.4f",
        report.n_prototypes,
        report.accuracy,
        report.ground_truth_accuracy,
    )
    return report
