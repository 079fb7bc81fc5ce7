"""Entry point for protoAlike."""

from __future__ import annotations

import logging
import sys

import yaml

from src.cli.commands import build_parser, dispatch, resolve_settings
from src.models.errors import AlikePartsError, PipelineStageError


def main(argv: list[str] | None = None) -> int:
    """Parse the command line, run the sub-command and return the exit code.

    Returns:
        0 on success, 1 on any configuration or pipeline failure. Usage errors
        exit with 2 from argparse.
    """
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
    logger = logging.getLogger(__name__)

    args = build_parser().parse_args(argv)
    if args.log_level:
        logging.getLogger().setLevel(args.log_level)

    try:
        settings = resolve_settings(args)
        logging.getLogger().setLevel(settings.log_level.upper())
        dispatch(args, settings)
    except PipelineStageError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (AlikePartsError, yaml.YAMLError, UnicodeDecodeError) as e:
        logger.error("Configuration error: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        logger.info("Interrupted by user (Ctrl+C). Shutting down.")
        return 0
    except Exception:
        logger.exception("Unhandled exception in command '%s'", args.command)
        return 1
    return 0
