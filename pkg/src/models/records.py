"""Serializable records exchanged between pipeline stages.

These are the JSON contracts of the artifacts a run writes: prototype sets,
explanations, evaluation reports and sweep records.
"""

from __future__ import annotations

import math
from enum import Enum
from pathlib import Path
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

from pydantic import BaseModel, Field, field_validator, model_validator

from src.utils.io import write_json


class Strategy(str, Enum):
    """Greedy prototype selection strategies."""

    GKM = "gkm"
    SMA = "sma"
    APETE = "apete"


class AssignmentMetric(str, Enum):
    """How an instance is matched to its nearest prototype."""

    COMBINED = "combined"
    DISTANCE_ONLY = "distance-only"


class SelectionConfig(BaseModel):
    """Configuration of one prototype selection run.

    Attributes:
        strategy: Which greedy strategy to run.
        beta: Weight of the feature-importance term; any finite real, negative allowed.
        k: Total budget for SM-A.
        k_per_class: Per-class budget for G-KM.
        epsilon: Relative-improvement threshold for A-PETE.
        assignment_metric: Metric used when assigning instances to prototypes.
    """

    strategy: Strategy = Strategy.GKM
    beta: float = 0.0
    k: int | None = None
    k_per_class: int | None = None
    epsilon: float = 0.01
    assignment_metric: AssignmentMetric = AssignmentMetric.COMBINED

    @field_validator("beta")
    @classmethod
    def _beta_finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError(f"beta must be finite, got {value}")
        return value

    @field_validator("epsilon")
    @classmethod
    def _epsilon_non_negative(cls, value: float) -> float:
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"epsilon must be a finite value >= 0, got {value}")
        return value

    @model_validator(mode="after")
    def _strategy_fields(self) -> Self:
        if self.strategy is Strategy.SMA and self.k is None:
            raise ValueError("strategy 'sma' requires k")
        if self.strategy is Strategy.GKM and self.k_per_class is None:
            raise ValueError("strategy 'gkm' requires k_per_class")
        return self

    def hyperparameter(self) -> tuple[str, float | int]:
        """Return the name and value of the strategy-specific hyperparameter."""
        if self.strategy is Strategy.SMA:
            return "k", self.k  # type: ignore[return-value]
        if self.strategy is Strategy.GKM:
            return "k_per_class", self.k_per_class  # type: ignore[return-value]
        return "epsilon", self.epsilon


class PrototypeSet(BaseModel):
    """Selected prototypes with their black-box labels and the greedy trace.

    Attributes:
        indices: Training-instance indices in selection order.
        labels: Predicted class of each prototype under the black-box model.
        objective_trace: Objective value after each greedy addition.
        config: Configuration the set was selected with.
    """

    indices: list[int]
    labels: list[int]
    objective_trace: list[float]
    config: SelectionConfig

    @model_validator(mode="after")
    def _consistent(self) -> Self:
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("prototype indices must be distinct")
        if len(self.labels) != len(self.indices):
            raise ValueError("labels must align with indices")
        return self

    def __len__(self) -> int:
        return len(self.indices)

    def save(self, path: Path) -> None:
        """Write the prototype set as canonical JSON."""
        write_json(path, self)

    @classmethod
    def load(cls, path: Path) -> Self:
        """Read a prototype set written by :meth:`save`."""
        return cls.model_validate_json(path.read_text(encoding="utf-8"))


class AlikeExplanation(BaseModel):
    """Alike parts between one instance and its nearest prototype.

    Attributes:
        instance_index: Row of the explained instance in its own dataset.
        prototype_index: Training index of the nearest prototype.
        prototype_label: Black-box label of that prototype.
        weights: Per-feature product of the two normalized attribution rows.
        mask: 1 where the weight is strictly above the mean weight.
        assignment_cost: Cost under which the prototype was chosen.
        alike_importance: Normalized importance of the explained instance summed over the mask.
        metric_used: Assignment metric.
        provider: Attribution provider that produced the weights.
    """

    instance_index: int
    prototype_index: int
    prototype_label: int
    weights: list[float]
    mask: list[int]
    assignment_cost: float
    alike_importance: float
    metric_used: AssignmentMetric
    provider: str

    @property
    def mask_length(self) -> int:
        """Number of features in the alike part."""
        return sum(self.mask)

    @property
    def has_alike_part(self) -> bool:
        """False when the weights were constant and no feature stands out."""
        return self.mask_length > 0


class EvaluationReport(BaseModel):
    """Accuracy of the 1-NN-over-prototypes surrogate on a test set.

    ``accuracy`` is fidelity to the black-box predictions; ``ground_truth_accuracy``
    compares against the dataset labels. Rows of ``confusion`` are black-box
    predictions, columns are surrogate predictions. ``per_class_accuracy`` holds one
    real per class; a class with zero ``per_class_support`` (test instances the
    black box assigns to it) scores 0.0.
    """

    accuracy: float
    ground_truth_accuracy: float
    per_class_accuracy: list[float]
    per_class_support: list[int]
    confusion: list[list[int]]
    n_prototypes: int
    n_test: int
    config: SelectionConfig


class SweepRecord(BaseModel):
    """One cell of a beta x hyperparameter sweep.

    ``frequencies`` follow the feature order; paths are relative to the sweep directory.
    """

    strategy: Strategy
    beta: float
    hyperparameter: str
    hyperparameter_value: float | int
    accuracy: float
    ground_truth_accuracy: float
    mean_alike_importance: float
    mean_mask_length: float
    n_prototypes: int
    frequencies: list[float] = Field(default_factory=list)
    explanations_path: str | None = Field(default=None)
    frequencies_path: str | None = Field(default=None)
    prototypes_path: str | None = Field(default=None)
