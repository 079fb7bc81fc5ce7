"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class AlikePartsError(Exception):
    """Base class for all errors raised by protoAlike."""

    pass


class ConfigError(AlikePartsError, ValueError):
    """Raised when configuration values are missing or inconsistent."""

    pass


class DatasetError(AlikePartsError):
    """Raised when a dataset cannot be read or violates its invariants."""

    pass


class SchemaError(DatasetError, ValueError):
    """Raised when a CSV column cannot be interpreted.

    Attributes:
        column: Name of the offending column (``None`` for file-level problems).
        row: 1-based data row of the offending cell, if known.
    """

    def __init__(self, message: str, column: str | None = None, row: int | None = None) -> None:
        super().__init__(message)
        self.column = column
        self.row = row


class SplitError(DatasetError, ValueError):
    """Raised when a stratified split cannot satisfy its constraints."""

    pass


class ForestError(AlikePartsError, ValueError):
    """Raised for invalid training parameters, inputs or forest documents."""

    pass


class AttributionError(AlikePartsError, ValueError):
    """Raised when feature attributions cannot be computed or imported."""

    pass


class ProximityError(AlikePartsError, ValueError):
    """Raised for invalid tree-distance queries."""

    pass


class SelectionError(AlikePartsError, ValueError):
    """Raised when a prototype selection request is invalid."""

    pass


class ExplanationError(AlikePartsError, ValueError):
    """Raised when an alike-parts explanation cannot be produced."""

    pass


class PipelineStageError(AlikePartsError):
    """Wraps a failure with the name of the pipeline stage it happened in.

    Attributes:
        stage: Stage name (``load``, ``split``, ``train``, ``attribute``, ``distance``,
            ``select``, ``explain``, ``evaluate``, ``sweep``).
    """

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
