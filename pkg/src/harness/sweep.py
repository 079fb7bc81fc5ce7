"""Grid sweep over beta and the strategy hyperparameter.

Every cell selects prototypes on the training set, evaluates the surrogate on the
test set and explains every test instance. Distances and attributions are computed
once and shared by all cells.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from src.core.alike import (
    explain_queries,
    prototype_table,
    write_explanations,
    write_frequencies,
    write_prototype_table,
)
from src.core.attribution import AttributionMatrix
from src.core.forest import Forest
from src.core.proximity import DistanceMatrix, cross_distances, distance_matrix
from src.core.selection import select
from src.data.dataset import Dataset
from src.harness.evaluation import evaluate_surrogate
from src.models.records import AssignmentMetric, SelectionConfig, Strategy, SweepRecord

logger = logging.getLogger(__name__)

SWEEP_RECORDS_FILE = "sweep.jsonl"
SWEEP_EXPLANATIONS_DIR = "sweep_explanations"


def cell_config(
    strategy: Strategy | str,
    beta: float,
    value: float,
    metric: AssignmentMetric | str = AssignmentMetric.COMBINED,
) -> SelectionConfig:
    """Selection config of one grid cell; *value* is ``k``, ``k_per_class`` or ``epsilon``."""
    strategy = Strategy(strategy)
    fields: dict[str, object] = {
        "strategy": strategy,
        "beta": float(beta),
        "assignment_metric": AssignmentMetric(metric),
    }
    if strategy is Strategy.SMA:
        fields["k"] = int(value)
    elif strategy is Strategy.GKM:
        fields["k_per_class"] = int(value)
    else:
        fields["epsilon"] = float(value)
    return SelectionConfig(**fields)


def iter_cells(
    strategies: Iterable[Strategy | str],
    beta_grid: Sequence[float],
    hyper_grid: Mapping[Strategy | str, Sequence[float]],
    metric: AssignmentMetric | str = AssignmentMetric.COMBINED,
) -> list[SelectionConfig]:
    """All cells in (strategy, beta, hyperparameter) order.

    Raises:
        ValueError: If a grid is empty or a strategy has no hyperparameter values.
    """
    if not beta_grid:
        raise ValueError("beta_grid must not be empty")
    grid = {Strategy(key): list(values) for key, values in hyper_grid.items()}
    cells: list[SelectionConfig] = []
    for strategy in map(Strategy, strategies):
        values = grid.get(strategy)
        if not values:
            raise ValueError(f"no hyperparameter values for strategy '{strategy.value}'")
        for beta in beta_grid:
            for value in values:
                cells.append(cell_config(strategy, beta, value, metric))
    if not cells:
        raise ValueError("no strategies to sweep")
    if 0.0 not in {float(b) for b in beta_grid}:
        logger.warning("beta_grid has no 0; the raw baseline is not part of this sweep")
    return cells


def _cell_stem(config: SelectionConfig) -> str:
    name, value = config.hyperparameter()
    return f"{config.strategy.value}_beta={config.beta!r}_{name}={value!r}"


def run_cell(
    config: SelectionConfig,
    train: Dataset,
    test: Dataset,
    forest: Forest,
    D: DistanceMatrix,
    query_distances: np.ndarray,
    train_predictions: np.ndarray,
    A_train: AttributionMatrix,
    A_test: AttributionMatrix,
    out_dir: Path | None = None,
) -> SweepRecord:
    """Select, evaluate and explain for one cell.

    With *out_dir* the cell writes its explanations (JSONL), highlight frequencies and
    prototype attribution table (CSV) under ``sweep_explanations/``.
    """
    prototypes = select(config, D, A_train, train_predictions)
    report = evaluate_surrogate(
        prototypes,
        train,
        test,
        forest,
        A_train,
        A_test,
        config.beta,
        config.assignment_metric,
        query_distances=query_distances,
    )
    alike = explain_queries(
        query_distances,
        prototypes,
        A_test,
        A_train,
        config.beta,
        config.assignment_metric,
        train.feature_names,
    )
    paths: dict[str, str | None] = {
        "explanations_path": None,
        "frequencies_path": None,
        "prototypes_path": None,
    }
    if out_dir is not None:
        stem = Path(SWEEP_EXPLANATIONS_DIR) / _cell_stem(config)
        explanations = stem.with_name(f"{stem.name}.jsonl")
        frequencies = stem.with_name(f"{stem.name}_frequencies.csv")
        table = stem.with_name(f"{stem.name}_prototypes.csv")
        write_explanations(alike, out_dir / explanations)
        write_frequencies(alike, out_dir / frequencies)
        write_prototype_table(
            prototype_table(prototypes, A_train, train.feature_names, train.class_names),
            out_dir / table,
        )
        paths = {
            "explanations_path": explanations.as_posix(),
            "frequencies_path": frequencies.as_posix(),
            "prototypes_path": table.as_posix(),
        }

    name, value = config.hyperparameter()
    record = SweepRecord(
        strategy=config.strategy,
        beta=config.beta,
        hyperparameter=name,
        hyperparameter_value=value,
        accuracy=report.accuracy,
        ground_truth_accuracy=report.ground_truth_accuracy,
        mean_alike_importance=alike.mean_alike_importance,
        mean_mask_length=alike.mean_mask_length,
        n_prototypes=len(prototypes),
        frequencies=alike.frequencies,
        **paths,
    )
    logger.info(
        "Sweep cell %s beta=%s %s=%s: fidelity %.4f, %d prototypes",
        config.strategy.value,
        config.beta,
        name,
        value,
        record.accuracy,
        record.n_prototypes,
    )
    return record


def sweep(
    train: Dataset,
    test: Dataset,
    forest: Forest,
    strategies: Iterable[Strategy | str],
    beta_grid: Sequence[float],
    hyper_grid: Mapping[Strategy | str, Sequence[float]],
    A_train: AttributionMatrix,
    A_test: AttributionMatrix,
    metric: AssignmentMetric | str = AssignmentMetric.COMBINED,
    D: DistanceMatrix | None = None,
    out_dir: Path | None = None,
    n_jobs: int = 1,
) -> list[SweepRecord]:
    """Evaluate every (strategy, beta, hyperparameter) cell.

    Records are appended to ``sweep.jsonl`` in *out_dir* as cells finish, in grid
    order; each cell's test explanations go to its own JSONL file.

    Args:
        train: Training set; prototypes are drawn from it.
        test: Held-out set used for fidelity and explanations.
        forest: The black-box model.
        strategies: Strategies to sweep.
        beta_grid: Beta values.
        hyper_grid: Hyperparameter values per strategy.
        A_train: Training attributions.
        A_test: Test attributions.
        metric: Assignment metric for every cell.
        D: Precomputed training distances (computed when omitted).
        out_dir: Directory for the records and explanation files; nothing is written if ``None``.
        n_jobs: Cells evaluated in parallel.

    Returns:
        One record per cell.
    """
    cells = iter_cells(strategies, beta_grid, hyper_grid, metric)
    D = D if D is not None else distance_matrix(forest, train)
    query_distances = cross_distances(forest, test.features, train.features)
    train_predictions = forest.predict_labels(train.features)
    logger.info("Sweeping %d cells with n_jobs=%d", len(cells), n_jobs)

    records_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        records_path = out_dir / SWEEP_RECORDS_FILE
        records_path.write_text("", encoding="utf-8")

    results = Parallel(n_jobs=n_jobs, return_as="generator")(
        delayed(run_cell)(
            config,
            train,
            test,
            forest,
            D,
            query_distances,
            train_predictions,
            A_train,
            A_test,
            out_dir,
        )
        for config in cells
    )
    records: list[SweepRecord] = []
    for record in results:
        records.append(record)
        if records_path is not None:
            with open(records_path, "a", encoding="utf-8") as fh:
                payload = record.model_dump(mode="json")
                fh.write(json.dumps(payload, sort_keys=True, allow_nan=False) + "\n")
    return records
