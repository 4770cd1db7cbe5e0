"""
``cellmix simulate``: Euler-Maruyama sample paths, optionally with their separatrix clocks.
"""

import argparse
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from cellmix.commands.common import (
    add_flow_arguments,
    add_output_argument,
    add_seed_argument,
    add_step_arguments,
    flow_from_args,
    policy_from_args,
    run_config,
)
from cellmix.config.settings import resolve_jobs
from cellmix.exceptions import EXIT_OK, CellmixValidationError
from cellmix.models.params import FlowParams, StepPolicy
from cellmix.models.results import StoppingClock
from cellmix.services import stopping
from cellmix.services.output import events_path, write_table
from cellmix.services.rng import RngStream
from cellmix.services.sde import TimeReached, resolve_dt, simulate_until, uniform_starts

logger = logging.getLogger(__name__)

EVENT_COLUMNS = ["sample_id", "kind", "n", "time", "x1", "x2"]

# Stream for starting points, disjoint from the per-sample streams
START_STREAM = 2 ** 62 + 2


def register(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("simulate", help="Simulate sample paths of the diffusion")
    add_flow_arguments(parser)
    add_step_arguments(parser)
    parser.add_argument("--t-max", type=float, required=True, help="Simulated duration")
    parser.add_argument("--samples", type=int, default=1, help="Number of independent paths")
    parser.add_argument("--stride", type=int, default=1, help="Keep every stride-th step")
    parser.add_argument("--start", type=float, nargs=2, default=None, metavar=("X1", "X2"),
                        help="Common starting point (default: uniform per sample)")
    parser.add_argument("--clock", choices=["none", "all"], default="none",
                        help="Also write separatrix clock events to <stem>.events.csv")
    add_seed_argument(parser)
    add_output_argument(parser)
    parser.set_defaults(handler=handle)
    return parser


def clock_rows(sample_id: int, clock: StoppingClock) -> List[dict]:
    """Flatten a clock into event rows; locations are reduced onto the unit torus."""
    rows = []

    def add(kind, n, event):
        x = np.mod(event.location, 1.0)
        rows.append({"sample_id": sample_id, "kind": kind, "n": n, "time": event.time, "x1": x[0], "x2": x[1]})

    if clock.entry_time is not None:
        rows.append({"sample_id": sample_id, "kind": "entry", "n": 0, "time": clock.entry_time,
                     "x1": float("nan"), "x2": float("nan")})
    if clock.tau0 is not None:
        add("tau0", 0, clock.tau0)
    for i, e in enumerate(clock.sigma_seq, 1):
        add("sigma", i, e)
    for i, e in enumerate(clock.tau_seq, 1):
        add("tau", i, e)
    for axis in (1, 2):
        for i, e in enumerate(clock.tau_axis[axis], 1):
            add(f"tau{axis}", i, e)
    for i, e in enumerate(clock.tau_check_seq, 1):
        add("tau_check", i, e)
    return rows


def simulate_sample(task) -> Tuple[pd.DataFrame, List[dict]]:
    i, x0, params, policy, seed, t_max, stride, with_clock = task
    builder: Optional[stopping.ClockBuilder] = stopping.ClockBuilder(params) if with_clock else None
    observers = [builder.update] if builder else []
    traj, _ = simulate_until(x0, TimeReached(t_max), params, policy, RngStream(seed, i),
                             stride=stride, observers=observers)
    events = clock_rows(i, builder.finish()) if builder else []
    return traj.to_frame(sample_id=i), events


def handle(args: argparse.Namespace) -> int:
    params: FlowParams = flow_from_args(args)
    policy: StepPolicy = policy_from_args(args)
    if args.samples < 1 or args.stride < 1 or args.t_max <= 0:
        raise CellmixValidationError("--samples and --stride must be positive and --t-max > 0")
    with_clock = args.clock == "all"
    if with_clock and params.amplitude == 0:
        raise CellmixValidationError("separatrix clocks need A > 0")
    dt = resolve_dt(params, policy)
    if policy.t_max is None or policy.t_max < args.t_max:
        policy = policy.copy(update={"t_max": args.t_max + 2 * dt})

    if args.start is not None:
        starts = np.tile(np.array(args.start, dtype=float), (args.samples, 1))
    else:
        starts = uniform_starts(RngStream(args.seed, START_STREAM), args.samples)
    tasks = [(i, starts[i], params, policy, args.seed, args.t_max, args.stride, with_clock)
             for i in range(args.samples)]
    jobs = resolve_jobs(args.jobs)
    logger.info(f"🎲 Simulating {args.samples} paths to t={args.t_max} with dt={dt:.3e}")
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(simulate_sample, tasks))
    else:
        results = [simulate_sample(t) for t in tasks]

    config = run_config(args, flow=params, policy=policy)
    table = pd.concat([frame for frame, _ in results], ignore_index=True)
    write_table(table, args.out, config)
    if with_clock:
        events = pd.DataFrame([row for _, rows in results for row in rows], columns=EVENT_COLUMNS)
        target = events_path(args.out)
        if target is None:
            write_table(events, "-", config)
        else:
            write_table(events, target, config)
    return EXIT_OK
