"""
``cellmix spectral``: dissipation time, mixing time, effective diffusivity and their relation.
"""

import argparse
import logging

import pandas as pd

from cellmix.commands.common import (
    add_flow_arguments,
    add_output_argument,
    add_seed_argument,
    flow_from_args,
    run_config,
)
from cellmix.config import defaults
from cellmix.exceptions import EXIT_OK
from cellmix.models.params import SolverConfig
from cellmix.services import spectral
from cellmix.services.output import write_table

logger = logging.getLogger(__name__)

MEASURES = ("tdiss", "tmix", "deff", "relation", "poincare")


def register(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("spectral", help="Pseudospectral measurements")
    add_flow_arguments(parser)
    parser.add_argument("--n", type=int, default=128, help="Modes per dimension (power of two)")
    parser.add_argument("--measure", choices=MEASURES, required=True)
    parser.add_argument("--dt", type=float, default=None, help="Explicit solver step (checked against the CFL limit)")
    parser.add_argument("--probes", type=int, default=defaults.TDISS_PROBES, help="Random probes for t_diss")
    parser.add_argument("--power-iterations", type=int, default=defaults.POWER_ITERATIONS)
    parser.add_argument("--scheme", choices=["rk4", "midpoint"], default="rk4")
    parser.add_argument("--no-dealias", action="store_true", help="Disable 2/3-rule dealiasing")
    parser.add_argument("--no-resolution-guard", action="store_true",
                        help="Run even when the boundary layer is under-resolved")
    add_seed_argument(parser)
    add_output_argument(parser)
    parser.set_defaults(handler=handle)
    return parser


def solver_from_args(args: argparse.Namespace) -> SolverConfig:
    return SolverConfig(
        n=args.n,
        dt=args.dt,
        dealias=not args.no_dealias,
        resolution_guard=not args.no_resolution_guard,
        probes=args.probes,
        power_iterations=args.power_iterations,
        seed=args.seed,
        scheme=args.scheme,
    )


def handle(args: argparse.Namespace) -> int:
    params = flow_from_args(args)
    solver = solver_from_args(args)
    if args.measure == "tdiss":
        rows = [("t_diss", spectral.dissipation_time(params, solver))]
    elif args.measure == "tmix":
        rows = [("t_mix", spectral.mixing_time_tv(params, solver))]
    elif args.measure == "deff":
        d = spectral.effective_diffusivity(params, solver)
        rows = [("d11", d[0, 0]), ("d12", d[0, 1]), ("d21", d[1, 0]), ("d22", d[1, 1])]
    elif args.measure == "relation":
        report = spectral.verify_tmix_tdis_relation(params, solver)
        rows = [(k, float(v)) for k, v in report.dict().items()]
    else:
        rows = list(spectral.poincare_time(params.kappa).items())
    table = pd.DataFrame(rows, columns=["quantity", "value"])
    write_table(table, args.out, run_config(args, flow=params, solver=solver))
    return EXIT_OK
