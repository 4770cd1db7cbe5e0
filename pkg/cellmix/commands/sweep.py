"""
``cellmix sweep``: run one estimator over a parameter grid read from a TOML spec.
"""

import argparse
import logging
import tomllib
from pathlib import Path

from cellmix.commands.common import add_output_argument, run_config
from cellmix.config.settings import resolve_jobs
from cellmix.exceptions import EXIT_OK, CellmixValidationError
from cellmix.models.params import SweepSpec
from cellmix.services.experiments import run_sweep
from cellmix.services.output import write_table

logger = logging.getLogger(__name__)


def register(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("sweep", help="Parameter sweep for one estimator")
    parser.add_argument("--spec", required=True, help="TOML file with eps/amp/kappa grids, estimator, samples, seed")
    parser.add_argument("--timings", action="store_true", help="Add a wall_time column")
    add_output_argument(parser)
    parser.set_defaults(handler=handle)
    return parser


def load_spec(path: str) -> SweepSpec:
    """Parse a sweep spec; the keys may sit at top level or under a [sweep] table."""
    try:
        with open(Path(path), "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise CellmixValidationError(f"sweep spec not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise CellmixValidationError(f"malformed sweep spec {path}: {e}")
    return SweepSpec(**data.get("sweep", data))


def handle(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec)
    table = run_sweep(spec, jobs=resolve_jobs(args.jobs), timings=args.timings)
    write_table(table, args.out, run_config(args, sweep=spec))
    return EXIT_OK
