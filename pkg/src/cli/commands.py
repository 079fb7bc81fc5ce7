"""Command-line surface: ``train``, ``select``, ``explain``, ``evaluate``, ``sweep``, ``run``.

Values come from the YAML config (``--config``) and are overridden by flags.
"""

from __future__ import annotations

import argparse
import logging
from collections.abc import Callable
from pathlib import Path
from typing import Any

from src.config.settings import AppSettings
from src.harness.pipeline import Pipeline, run_pipeline
from src.models.errors import ConfigError

logger = logging.getLogger(__name__)

# Flag destination -> dotted settings key.
_OVERRIDES = {
    "data": "data.path",
    "label_column": "data.label_column",
    "seed": "seed",
    "beta": "selection.beta",
    "strategy": "selection.strategy",
    "k": "selection.k",
    "k_per_class": "selection.k_per_class",
    "epsilon": "selection.epsilon",
    "metric": "selection.assignment_metric",
    "attribution_provider": "attribution.provider",
    "out_dir": "output.out_dir",
    "log_level": "log_level",
}


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file")
    common.add_argument("--data", help="dataset CSV path")
    common.add_argument("--label-column", help="name of the class column")
    common.add_argument("--seed", type=int, help="random seed (>= 0)")
    common.add_argument("--beta", type=float, help="weight of the feature-importance term")
    common.add_argument("--strategy", choices=["gkm", "sma", "apete"])
    common.add_argument("--k", type=int, help="total prototype budget (sma)")
    common.add_argument("--k-per-class", type=int, help="prototypes per class (gkm)")
    common.add_argument("--epsilon", type=float, help="relative-improvement threshold (apete)")
    common.add_argument("--metric", choices=["combined", "distance-only"])
    common.add_argument(
        "--attribution-provider", choices=["path", "exact-shapley", "imported"]
    )
    common.add_argument("--out-dir", help="parent directory of run directories")
    common.add_argument("--forest", type=Path, help="reuse a saved forest.json")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return common


def build_parser() -> argparse.ArgumentParser:
    """Parser with one sub-command per pipeline entry point."""
    parser = argparse.ArgumentParser(
        prog="protoalike",
        description="Prototype selection and alike-part explanations for random forests.",
    )
    common = _common_flags()
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the forest and write forest.json")
    sub.add_parser("select", parents=[common], help="select prototypes")
    for name, help_text in (
        ("explain", "explain test instances by their nearest prototype"),
        ("evaluate", "evaluate the 1-NN-over-prototypes surrogate"),
    ):
        command = sub.add_parser(name, parents=[common], help=help_text)
        command.add_argument("--prototypes", type=Path, help="reuse a saved prototypes.json")
    sub.add_parser("sweep", parents=[common], help="sweep beta x hyperparameter grid")
    sub.add_parser("run", parents=[common], help="run the full pipeline")
    return parser


def resolve_settings(args: argparse.Namespace) -> AppSettings:
    """Load ``--config`` (or ``config/config.yaml``) and apply flag overrides.

    Raises:
        ConfigError: If an explicit config file does not exist or an override is invalid.
    """
    if args.config is not None and not args.config.exists():
        raise ConfigError(f"config file not found: {args.config}")
    settings = AppSettings.load(args.config)
    overrides: dict[str, Any] = {key: getattr(args, dest) for dest, key in _OVERRIDES.items()}
    return settings.with_overrides(overrides)


def _pipeline(args: argparse.Namespace, settings: AppSettings) -> Pipeline:
    pipeline = Pipeline(
        settings,
        forest_path=args.forest,
        prototypes_path=getattr(args, "prototypes", None),
    )
    pipeline.write_config()
    return pipeline


def _train(args: argparse.Namespace, settings: AppSettings) -> Path:
    pipeline = _pipeline(args, settings)
    forest = pipeline.forest
    print(f"trained {forest.n_trees} trees on {forest.n_features} features")
    return pipeline.run_dir


def _select(args: argparse.Namespace, settings: AppSettings) -> Path:
    pipeline = _pipeline(args, settings)
    prototypes = pipeline.prototypes
    print(f"selected {len(prototypes)} prototypes: {prototypes.indices}")
    return pipeline.run_dir


def _explain(args: argparse.Namespace, settings: AppSettings) -> Path:
    pipeline = _pipeline(args, settings)
    report = pipeline.explanations
    print(
        f"explained {len(report.explanations)} instances, "
        f"mean alike-part length {report.mean_mask_length:.3f}"
    )
    return pipeline.run_dir


def _evaluate(args: argparse.Namespace, settings: AppSettings) -> Path:
    pipeline = _pipeline(args, settings)
    report = pipeline.evaluation
    print(
        f"fidelity {report.accuracy:.4f}, ground-truth accuracy "
        f"{report.ground_truth_accuracy:.4f} with {report.n_prototypes} prototypes"
    )
    return pipeline.run_dir


def _sweep(args: argparse.Namespace, settings: AppSettings) -> Path:
    pipeline = _pipeline(args, settings)
    records = pipeline.run_sweep()
    print(f"swept {len(records)} cells")
    return pipeline.run_dir


def _run(args: argparse.Namespace, settings: AppSettings) -> Path:
    return run_pipeline(settings, forest_path=args.forest)


COMMANDS: dict[str, Callable[[argparse.Namespace, AppSettings], Path]] = {
    "train": _train,
    "select": _select,
    "explain": _explain,
    "evaluate": _evaluate,
    "sweep": _sweep,
    "run": _run,
}


def dispatch(args: argparse.Namespace, settings: AppSettings) -> Path:
    """Run the sub-command named in *args*; returns the run directory."""
    run_dir = COMMANDS[args.command](args, settings)
    print(f"artifacts written to {run_dir}")
    return run_dir
