"""
``cellmix couple``: coupling times of independent pairs through the staged coupling.
"""

import argparse
import logging

import pandas as pd

from cellmix.commands.common import (
    add_flow_arguments,
    add_output_argument,
    add_seed_argument,
    add_step_arguments,
    flow_from_args,
    policy_from_args,
    report_lines,
    run_config,
)
from cellmix.config.settings import resolve_jobs
from cellmix.exceptions import EXIT_OK
from cellmix.models.results import STAGES
from cellmix.services.coupling import estimate_tau_cpl
from cellmix.services.output import STDOUT, write_table

logger = logging.getLogger(__name__)

COLUMNS = ["pair_id", *STAGES, "tau_cpl", "success"]


def register(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("couple", help="Estimate the coupling time tau_cpl")
    add_flow_arguments(parser)
    add_step_arguments(parser)
    parser.add_argument("--samples", type=int, default=30, help="Number of pairs (>= 30)")
    parser.add_argument("--pairs", choices=["uniform", "grid"], default="uniform", help="Starting-pair distribution")
    add_seed_argument(parser)
    add_output_argument(parser)
    parser.set_defaults(handler=handle)
    return parser


def handle(args: argparse.Namespace) -> int:
    params = flow_from_args(args)
    policy = policy_from_args(args)
    stats, outcomes = estimate_tau_cpl(params, args.samples, args.pairs, policy, args.seed, resolve_jobs(args.jobs))
    rows = []
    for i, o in enumerate(outcomes):
        row = {"pair_id": i}
        for stage in STAGES:
            row[stage] = o.stage_durations.get(stage, float("nan"))
        row["tau_cpl"] = o.tau_cpl if o.tau_cpl is not None else float("nan")
        row["success"] = int(o.success)
        rows.append(row)
    write_table(pd.DataFrame(rows, columns=COLUMNS), args.out, run_config(args, flow=params, policy=policy))

    summary = {
        "n_samples": stats.n_samples,
        "failures": stats.failures,
        "mean": f"{stats.mean:.12g}",
        "se": f"{stats.se:.6g}",
        "median": f"{stats.median:.12g}",
        "upper_quartile": f"{stats.upper_quartile:.12g}",
    }
    if stats.reflection_success_rate is not None:
        summary["reflection_success_rate"] = f"{stats.reflection_success_rate:.6g}"
    report_lines(summary, to_stderr=args.out == STDOUT)
    return EXIT_OK
