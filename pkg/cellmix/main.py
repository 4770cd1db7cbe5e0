import argparse
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from cellmix import __version__
from cellmix.commands import couple, field, report, simulate, spectral, sweep
from cellmix.config.settings import get_settings
from cellmix.exceptions import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, CellmixError

logger = logging.getLogger(__name__)

COMMANDS = (field, simulate, couple, spectral, sweep, report)


class CellmixArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the validation code."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = CellmixArgumentParser(
        prog="cellmix",
        description="Cellular-flow dissipation enhancement: fields, SDE paths, couplings, spectral solves, sweeps",
    )
    parser.add_argument("--version", action="version", version=f"cellmix {__version__}")
    parser.add_argument("--jobs", type=int, default=None, help="Worker processes (default: CELLMIX_JOBS or all cores)")
    parser.add_argument("--log-level", default=None, help="Logging level (default: CELLMIX_LOG_LEVEL or INFO)")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True
    for module in COMMANDS:
        module.register(subparsers)
    return parser


def configure_logging(level: Optional[str]) -> None:
    level = (level or get_settings().log_level).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse ``argv`` and dispatch to a subcommand.

    Returns:
        int: 0 on success, 1 on a usage or validation error, 2 on a runtime failure
    """
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else int(e.code)

    try:
        configure_logging(args.log_level)
        return args.handler(args)
    except ValidationError as e:
        logger.error(f"❌ Invalid parameters: {e}")
        print(f"cellmix: invalid parameters: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except CellmixError as e:
        logger.error(f"❌ {type(e).__name__}: {e.detail}")
        print(f"cellmix: error: {e.detail}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        logger.error(f"❌ Invalid argument: {str(e)}")
        print(f"cellmix: error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:
        logger.exception(f"❌ Unexpected failure: {str(e)}")
        return EXIT_RUNTIME


def run() -> None:
    sys.exit(main())
