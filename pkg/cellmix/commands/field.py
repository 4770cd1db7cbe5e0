"""
``cellmix field``: sample H, the cutoff and the velocity on a grid and print diagnostics.
"""

import argparse
import logging

from cellmix.commands.common import add_flow_arguments, add_output_argument, flow_from_args, report_lines, run_config
from cellmix.exceptions import EXIT_OK
from cellmix.services.flowfield import field_diagnostics, stream_grid
from cellmix.services.output import STDOUT, write_table

logger = logging.getLogger(__name__)


def register(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("field", help="Dump the velocity field and its diagnostics")
    add_flow_arguments(parser)
    parser.add_argument("--grid", type=int, default=64, help="Grid points per side (power of two, >= 16)")
    add_output_argument(parser)
    parser.set_defaults(handler=handle)
    return parser


def handle(args: argparse.Namespace) -> int:
    params = flow_from_args(args)
    diagnostics = field_diagnostics(params, args.grid)
    table = stream_grid(params, args.grid)
    write_table(table, args.out, run_config(args, flow=params))

    values = {
        "grid_n": diagnostics.grid_n,
        "div_residual": f"{diagnostics.div_residual:.6e}",
        "gradient_residual": f"{diagnostics.gradient_residual:.6e}",
        "max_speed": f"{diagnostics.max_speed:.12g}",
        "speed_bound": f"{diagnostics.speed_bound:.12g}",
    }
    for name, residual in diagnostics.symmetry_residuals.items():
        values[f"symmetry_{name}"] = f"{residual:.6e}"
    report_lines(values, to_stderr=args.out == STDOUT)
    return EXIT_OK
