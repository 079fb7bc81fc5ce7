"""Application settings loaded from environment variables and YAML config files."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from yaml.nodes import MappingNode

from src.core.attribution import AttributionProvider
from src.models.errors import ConfigError
from src.models.records import AssignmentMetric, SelectionConfig, Strategy
from src.utils.io import config_hash

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).resolve().parent.parent.parent / "config"

# Settings that do not influence any computed artifact.
_UNHASHED_FIELDS = {"output", "log_level"}


class DuplicateKeyError(yaml.YAMLError):
    """Exception raised when duplicate keys are found in YAML."""

    pass


class SafeLoaderWithDuplicateCheck(yaml.SafeLoader):
    """YAML SafeLoader that detects duplicate keys."""

    pass


def _construct_mapping_no_duplicates(
    loader: SafeLoaderWithDuplicateCheck, node: MappingNode
) -> dict[Any, Any]:
    """Construct a mapping while checking for duplicate keys.

    Args:
        loader: The YAML loader instance
        node: The YAML mapping node to construct

    Returns:
        Constructed mapping dictionary

    Raises:
        DuplicateKeyError: If duplicate keys are detected
    """
    loader.flatten_mapping(node)
    mapping: dict[Any, Any] = {}
    key_positions: dict[Any, tuple[int, int]] = {}

    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=False)

        if key in mapping:
            first_line, first_col = key_positions[key]
            raise DuplicateKeyError(
                f"Duplicate key '{key}' found at line {key_node.start_mark.line + 1}, "
                f"column {key_node.start_mark.column + 1}. "
                f"Previous occurrence at line {first_line}, column {first_col}."
            )

        key_positions[key] = (key_node.start_mark.line + 1, key_node.start_mark.column + 1)
        mapping[key] = loader.construct_object(value_node, deep=True)

    return mapping


SafeLoaderWithDuplicateCheck.add_constructor(
    yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping_no_duplicates
)


class DataSettings(BaseModel):
    """Where the dataset lives and how it is split.

    Attributes:
        path: CSV file with a header row.
        label_column: Name of the class column.
        missing_token: Cell text that marks a missing value (the empty cell by default).
        test_fraction: Share of every class held out for testing.
    """

    path: str = "data/sample_fruit.csv"
    label_column: str = "label"
    missing_token: str = ""
    test_fraction: float = Field(default=0.25, gt=0.0, lt=1.0)


class ForestSettings(BaseModel):
    """Random forest hyperparameters.

    Attributes:
        n_trees: Number of trees.
        max_depth: Maximum depth of every tree.
        min_leaf: Minimum number of rows in a leaf.
        mtry: Features sampled per split; ``None`` means ``ceil(sqrt(d))``.
        n_jobs: Parallel workers used for tree training.
    """

    n_trees: int = Field(default=100, ge=1)
    max_depth: int = Field(default=8, ge=1)
    min_leaf: int = Field(default=2, ge=1)
    mtry: int | None = Field(default=None, ge=1)
    n_jobs: int = 1


class AttributionSettings(BaseModel):
    """Attribution provider and its inputs.

    Attributes:
        provider: ``path``, ``exact-shapley`` or ``imported``.
        target_class: Explained class; ``None`` explains each instance's predicted class.
        background_size: Background rows sampled for ``exact-shapley``.
        import_train: Headerless CSV of raw training attributions (``imported`` only).
        import_test: Headerless CSV of raw test attributions (``imported`` only).
        export: Also write raw and normalized attribution matrices into the run directory.
    """

    provider: AttributionProvider = AttributionProvider.PATH
    target_class: int | None = None
    background_size: int = Field(default=32, ge=1)
    import_train: str | None = None
    import_test: str | None = None
    export: bool = False


class ProximitySettings(BaseModel):
    """Tree distance settings.

    Attributes:
        max_materialized: Largest training set for which the full distance matrix is held.
    """

    max_materialized: int = Field(default=5000, ge=0)


class SelectionSettings(BaseModel):
    """Prototype selection settings; see :class:`~src.models.records.SelectionConfig`."""

    strategy: Strategy = Strategy.GKM
    beta: float = 0.0
    k: int = 10
    k_per_class: int = 2
    epsilon: float = 0.01
    assignment_metric: AssignmentMetric = AssignmentMetric.COMBINED

    def to_config(self) -> SelectionConfig:
        """Build the selection config, keeping only the strategy's own hyperparameter."""
        fields: dict[str, Any] = {
            "strategy": self.strategy,
            "beta": self.beta,
            "assignment_metric": self.assignment_metric,
        }
        if self.strategy is Strategy.SMA:
            fields["k"] = self.k
        elif self.strategy is Strategy.GKM:
            fields["k_per_class"] = self.k_per_class
        else:
            fields["epsilon"] = self.epsilon
        return SelectionConfig(**fields)


def _default_hyper_grid() -> dict[Strategy, list[float]]:
    return {
        Strategy.GKM: [1, 2, 3],
        Strategy.SMA: [5, 10, 15],
        Strategy.APETE: [0.05, 0.01, 0.001],
    }


class SweepSettings(BaseModel):
    """Grid of the beta x hyperparameter sweep.

    Attributes:
        strategies: Strategies swept.
        beta_grid: Beta values; keep 0 in the grid for the raw baseline.
        hyper_grid: Hyperparameter values per strategy (``k_per_class``, ``k`` or ``epsilon``).
        n_jobs: Cells evaluated in parallel.
    """

    strategies: list[Strategy] = Field(default_factory=lambda: [Strategy.GKM])
    beta_grid: list[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0])
    hyper_grid: dict[Strategy, list[float]] = Field(default_factory=_default_hyper_grid)
    n_jobs: int = 1

    @field_validator("strategies", "beta_grid")
    @classmethod
    def _non_empty(cls, value: list[Any]) -> list[Any]:
        if not value:
            raise ValueError("sweep grids must not be empty")
        return value


class OutputSettings(BaseModel):
    """Where run directories are created.

    Attributes:
        out_dir: Parent directory of all run directories.
    """

    out_dir: str = "runs"


class AppSettings(BaseSettings):
    """Root application settings.

    ``log_level`` may come from the environment (``PROTOALIKE_LOG_LEVEL``);
    everything else is loaded from a YAML file via the ``load()`` class method.
    """

    model_config = SettingsConfigDict(env_prefix="PROTOALIKE_", extra="ignore")

    log_level: str = "INFO"
    seed: int = Field(default=0, ge=0)

    data: DataSettings = Field(default_factory=DataSettings)
    forest: ForestSettings = Field(default_factory=ForestSettings)
    attribution: AttributionSettings = Field(default_factory=AttributionSettings)
    proximity: ProximitySettings = Field(default_factory=ProximitySettings)
    selection: SelectionSettings = Field(default_factory=SelectionSettings)
    sweep: SweepSettings = Field(default_factory=SweepSettings)
    output: OutputSettings = Field(default_factory=OutputSettings)

    @classmethod
    def load(cls, config_path: Path | None = None) -> Self:
        """Create settings from a YAML file merged over the defaults.

        Args:
            config_path: YAML file. Defaults to ``config/config.yaml``; a missing
                file leaves every setting at its default.

        Returns:
            AppSettings instance with loaded configuration

        Raises:
            UnicodeDecodeError: If config file has encoding issues
            DuplicateKeyError: If config file has duplicate keys
            yaml.YAMLError: If config file has invalid YAML syntax
            ConfigError: If a value fails validation
        """
        config_path = config_path or CONFIG_DIR / "config.yaml"
        yaml_data: dict = {}

        if config_path.exists():
            try:
                with open(config_path, encoding="utf-8") as fh:
                    loaded = yaml.load(fh, Loader=SafeLoaderWithDuplicateCheck)
                if loaded is None:
                    yaml_data = {}
                elif isinstance(loaded, dict):
                    yaml_data = loaded
                else:
                    error_msg = (
                        f"Top-level YAML structure in {config_path} must be a mapping "
                        f"(dictionary), but found {type(loaded).__name__}. "
                        f"Please ensure the file starts with key-value pairs, e.g. 'data:'."
                    )
                    logger.error(error_msg)
                    raise yaml.YAMLError(error_msg)
                logger.info("Loaded config from %s", config_path)
            except UnicodeDecodeError as e:
                error_msg = (
                    f"Failed to read config file {config_path} due to encoding error. "
                    f"The file may contain invalid UTF-8 characters at position {e.start}. "
                    f"Original error: {e}"
                )
                logger.error(error_msg)
                raise UnicodeDecodeError(
                    e.encoding, e.object, e.start, e.end, error_msg
                ) from e
            except DuplicateKeyError as e:
                error_msg = f"Configuration file {config_path} contains duplicate keys. Error: {e}"
                logger.error(error_msg)
                raise DuplicateKeyError(error_msg) from e
            except yaml.YAMLError as e:
                error_msg = (
                    f"Failed to parse configuration file {config_path}. "
                    f"Please check the YAML syntax. Error: {e}"
                )
                logger.error(error_msg)
                raise yaml.YAMLError(error_msg) from e
        else:
            logger.info("Config file %s not found; using defaults", config_path)

        try:
            settings = cls(**yaml_data)
        except ValidationError as e:
            logger.error("Invalid configuration in %s", config_path)
            raise ConfigError(f"invalid configuration in {config_path}: {e}") from e

        logger.info(
            "Settings - data: %s, strategy: %s, beta: %s, seed: %d",
            settings.data.path,
            settings.selection.strategy.value,
            settings.selection.beta,
            settings.seed,
        )
        return settings

    def with_overrides(self, overrides: dict[str, Any]) -> Self:
        """Return a copy with dotted-key overrides applied (``None`` values are skipped).

        Args:
            overrides: Mapping such as ``{"selection.beta": 1.0, "seed": 3}``.

        Raises:
            ConfigError: If a key names no setting or a value fails validation.
        """
        data = self.model_dump(mode="json")
        for dotted, value in overrides.items():
            if value is None:
                continue
            *parents, leaf = dotted.split(".")
            target = data
            for part in parents:
                if not isinstance(target.get(part), dict):
                    raise ConfigError(f"unknown setting '{dotted}'")
                target = target[part]
            if leaf not in target:
                raise ConfigError(f"unknown setting '{dotted}'")
            target[leaf] = value
        try:
            return type(self).model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"invalid override: {e}") from e

    def artifact_settings(self) -> dict[str, Any]:
        """Every setting that influences the computed artifacts, in JSON form."""
        return self.model_dump(mode="json", exclude=_UNHASHED_FIELDS)

    def config_hash(self) -> str:
        """SHA-256 of :meth:`artifact_settings`."""
        return config_hash(self.artifact_settings())
