"""
Parsimonious HMM Recognizer - Main Entry Point

This module builds the `phmm` command line and dispatches each
subcommand to its handler.
"""
import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from src import __version__
from src.api import corpus, decoding, export, training
from src.api.context import settings_from_args
from src.utils.errors import ConfigurationError, PhmmError

logger = logging.getLogger("phmm")

ROUTERS = (corpus, training, decoding, export)


def common_options() -> argparse.ArgumentParser:
    """Options every subcommand accepts."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--workdir", help="artifact directory (default ./work)")
    common.add_argument("--jobs", type=int, help="worker processes (default 1)")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR (default INFO)")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phmm",
        description="Parsimonious HMM text-line recognition with writer-aware adaptation",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    common = common_options()
    for router in ROUTERS:
        router.register(subparsers, common)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 on success, 2 for pipeline errors (bad configuration, missing or
        mismatched artifacts, invalid data), 1 for anything unexpected.
    """
    args = build_parser().parse_args(argv)
    try:
        try:
            settings = settings_from_args(args)
        except ValidationError as exc:
            raise ConfigurationError(str(exc)) from exc
        settings.configure_logging()
        logger.debug("Running %s with workdir %s", args.command, settings.workdir)
        args.handler(args)
    except PhmmError as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 2
    except Exception:
        logger.exception("%s failed unexpectedly", args.command)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
