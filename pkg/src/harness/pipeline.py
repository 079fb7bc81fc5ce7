"""End-to-end run: load, split, train, attribute, distance, select, explain, evaluate.

Every stage writes its artifact into the run directory as soon as it finishes, so
a failing stage leaves the outputs of the earlier stages in place.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from src.config.settings import AppSettings
from src.core.alike import AlikeReport, explain_queries, write_explanations, write_frequencies
from src.core.attribution import (
    AttributionMatrix,
    AttributionProvider,
    compute_attributions,
    export_attributions,
    import_attributions,
    sample_background,
)
from src.core.forest import Forest, ForestParams, load_forest, save_forest, train
from src.core.proximity import DistanceMatrix, cross_distances, distance_matrix
from src.core.selection import load_prototypes, save_prototypes, select
from src.data.dataset import Dataset, load_csv, split
from src.harness.evaluation import evaluate_surrogate
from src.harness.sweep import sweep
from src.models.errors import AlikePartsError, ConfigError, PipelineStageError
from src.models.records import EvaluationReport, PrototypeSet, SweepRecord
from src.utils.io import write_json

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
FOREST_FILE = "forest.json"
PROTOTYPES_FILE = "prototypes.json"
EXPLANATIONS_FILE = "explanations.jsonl"
FREQUENCIES_FILE = "frequencies.csv"
EVALUATION_FILE = "evaluation.json"


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Re-raise any library or file error as a :class:`PipelineStageError` for *name*."""
    logger.info("Stage %s started", name)
    try:
        yield
    except PipelineStageError:
        raise
    except (AlikePartsError, OSError, ValueError) as e:
        logger.error("Stage %s failed: %s", name, e)
        raise PipelineStageError(name, str(e)) from e
    logger.info("Stage %s finished", name)


def run_directory(settings: AppSettings) -> Path:
    """``<out_dir>/run-<config hash prefix>-seed<seed>``."""
    digest = settings.config_hash()[:12]
    return Path(settings.output.out_dir) / f"run-{digest}-seed{settings.seed}"


@dataclass
class Attributions:
    """Training and test attributions computed under one provider and target policy."""

    train: AttributionMatrix
    test: AttributionMatrix


class Pipeline:
    """Lazily evaluated stages over one settings object.

    Accessing a stage property runs it (and everything it depends on) once and
    writes its artifact into :attr:`run_dir`.

    Attributes:
        settings: Resolved settings.
        run_dir: Directory receiving every artifact.
    """

    def __init__(
        self,
        settings: AppSettings,
        forest_path: Path | None = None,
        prototypes_path: Path | None = None,
    ) -> None:
        """Prepare a run.

        Args:
            settings: Resolved settings.
            forest_path: Reuse a saved forest instead of training one.
            prototypes_path: Reuse a saved prototype set instead of selecting one.
        """
        self.settings = settings
        self.forest_path = forest_path
        self.prototypes_path = prototypes_path
        self.run_dir = run_directory(settings)

    # ------------------------------------------------------------------
    # Stages
    # ------------------------------------------------------------------

    def write_config(self) -> Path:
        """Write the resolved settings; the first artifact of every run."""
        self.run_dir.mkdir(parents=True, exist_ok=True)
        return write_json(self.run_dir / CONFIG_FILE, self.settings.artifact_settings())

    @cached_property
    def dataset(self) -> Dataset:
        """The full dataset."""
        data = self.settings.data
        with stage("load"):
            return load_csv(data.path, data.label_column, data.missing_token)

    @cached_property
    def parts(self) -> tuple[Dataset, Dataset]:
        """``(train, test)`` stratified partition."""
        ds = self.dataset
        with stage("split"):
            return split(ds, self.settings.data.test_fraction, self.settings.seed)

    @property
    def train_set(self) -> Dataset:
        """Training part."""
        return self.parts[0]

    @property
    def test_set(self) -> Dataset:
        """Test part."""
        return self.parts[1]

    @cached_property
    def forest(self) -> Forest:
        """Trained (or loaded) black-box model; written to ``forest.json``."""
        train_set = self.train_set
        with stage("train"):
            if self.forest_path is not None:
                forest = load_forest(self.forest_path)
                if forest.n_features != train_set.n_features:
                    raise ConfigError(
                        f"forest {self.forest_path} expects {forest.n_features} features, "
                        f"dataset has {train_set.n_features}"
                    )
            else:
                f = self.settings.forest
                params = ForestParams(
                    n_trees=f.n_trees,
                    max_depth=f.max_depth,
                    min_leaf=f.min_leaf,
                    mtry=f.mtry,
                    seed=self.settings.seed,
                )
                forest = train(train_set, params, n_jobs=f.n_jobs)
            save_forest(forest, self.run_dir / FOREST_FILE)
        return forest

    @cached_property
    def train_predictions(self) -> np.ndarray:
        """Black-box labels of the training instances."""
        return self.forest.predict_labels(self.train_set.features)

    @cached_property
    def attributions(self) -> Attributions:
        """Training and test attributions."""
        forest, train_set, test_set = self.forest, self.train_set, self.test_set
        cfg = self.settings.attribution
        with stage("attribute"):
            if cfg.provider is AttributionProvider.IMPORTED:
                if cfg.import_train is None or cfg.import_test is None:
                    raise ConfigError(
                        "the imported provider needs attribution.import_train and import_test"
                    )
                result = Attributions(
                    train=import_attributions(
                        cfg.import_train, train_set.n_instances, train_set.n_features
                    ),
                    test=import_attributions(
                        cfg.import_test, test_set.n_instances, test_set.n_features
                    ),
                )
            else:
                background = None
                if cfg.provider is AttributionProvider.EXACT_SHAPLEY:
                    background = sample_background(
                        train_set, cfg.background_size, self.settings.seed
                    )
                result = Attributions(
                    train=compute_attributions(
                        forest, train_set, cfg.provider, cfg.target_class, background
                    ),
                    test=compute_attributions(
                        forest, test_set, cfg.provider, cfg.target_class, background
                    ),
                )
            if cfg.export:
                export_attributions(result.train, self.run_dir, "attributions_train")
                export_attributions(result.test, self.run_dir, "attributions_test")
        return result

    @cached_property
    def distances(self) -> DistanceMatrix:
        """Tree distances between training instances."""
        forest, train_set = self.forest, self.train_set
        with stage("distance"):
            return distance_matrix(
                forest, train_set, max_materialized=self.settings.proximity.max_materialized
            )

    @cached_property
    def query_distances(self) -> np.ndarray:
        """Tree distances from every test instance to every training instance."""
        forest, train_set, test_set = self.forest, self.train_set, self.test_set
        with stage("distance"):
            return cross_distances(forest, test_set.features, train_set.features)

    @cached_property
    def prototypes(self) -> PrototypeSet:
        """Selected (or loaded) prototypes; written to ``prototypes.json``."""
        if self.prototypes_path is not None:
            with stage("select"):
                prototypes = load_prototypes(self.prototypes_path)
                save_prototypes(prototypes, self.run_dir / PROTOTYPES_FILE)
            return prototypes
        D, A = self.distances, self.attributions.train
        labels = self.train_predictions
        with stage("select"):
            prototypes = select(self.settings.selection.to_config(), D, A, labels)
            save_prototypes(prototypes, self.run_dir / PROTOTYPES_FILE)
        return prototypes

    @cached_property
    def explanations(self) -> AlikeReport:
        """Alike parts of every test instance; JSONL plus frequency CSV."""
        prototypes, attributions = self.prototypes, self.attributions
        query_distances = self.query_distances
        selection = self.settings.selection
        with stage("explain"):
            report = explain_queries(
                query_distances,
                prototypes,
                attributions.test,
                attributions.train,
                selection.beta,
                selection.assignment_metric,
                list(self.train_set.feature_names),
            )
            write_explanations(report, self.run_dir / EXPLANATIONS_FILE)
            write_frequencies(report, self.run_dir / FREQUENCIES_FILE)
        return report

    @cached_property
    def evaluation(self) -> EvaluationReport:
        """Surrogate fidelity on the test set; written to ``evaluation.json``."""
        prototypes, attributions = self.prototypes, self.attributions
        query_distances = self.query_distances
        selection = self.settings.selection
        with stage("evaluate"):
            report = evaluate_surrogate(
                prototypes,
                self.train_set,
                self.test_set,
                self.forest,
                attributions.train,
                attributions.test,
                selection.beta,
                selection.assignment_metric,
                query_distances=query_distances,
            )
            write_json(self.run_dir / EVALUATION_FILE, report)
        return report

    def run_sweep(self) -> list[SweepRecord]:
        """Sweep the configured grid; records land in ``sweep.jsonl``."""
        attributions, D = self.attributions, self.distances
        cfg = self.settings.sweep
        with stage("sweep"):
            return sweep(
                self.train_set,
                self.test_set,
                self.forest,
                cfg.strategies,
                cfg.beta_grid,
                cfg.hyper_grid,
                attributions.train,
                attributions.test,
                metric=self.settings.selection.assignment_metric,
                D=D,
                out_dir=self.run_dir,
                n_jobs=cfg.n_jobs,
            )


def run_pipeline(settings: AppSettings, forest_path: Path | None = None) -> Path:
    """Run every stage and return the run directory.

    Args:
        settings: Resolved settings.
        forest_path: Reuse a saved forest instead of training one.

    Raises:
        PipelineStageError: Naming the first stage that failed.
    """
    pipeline = Pipeline(settings, forest_path=forest_path)
    pipeline.write_config()
    logger.info("Run directory: %s", pipeline.run_dir)
    explained = pipeline.explanations
    report = pipeline.evaluation
    logger.info(
        "Run finished: %d explanations, fidelity %.4f",
        len(explained.explanations),
        report.accuracy,
    )
    return pipeline.run_dir
