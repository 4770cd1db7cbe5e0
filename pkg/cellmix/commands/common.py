"""
Shared argument groups and helpers for the subcommands.
"""

import argparse
import sys
from typing import Any, Dict, Iterable

from cellmix.models.params import FlowParams, RunConfig, StepPolicy

# Flags that never reach output headers
_NOT_ECHOED = {"handler", "jobs", "log_level", "command"}


def add_flow_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("flow")
    group.add_argument("--eps", type=float, required=True, help="Cell size epsilon (1/eps integer)")
    group.add_argument("--amp", type=float, required=True, help="Flow amplitude A")
    group.add_argument("--kappa", type=float, required=True, help="Molecular diffusivity kappa")


def flow_from_args(args: argparse.Namespace) -> FlowParams:
    return FlowParams(epsilon=args.eps, amplitude=args.amp, kappa=args.kappa)


def add_step_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("time stepping")
    group.add_argument("--dt", type=float, default=None, help="Explicit step (default: boundary-layer step)")
    group.add_argument("--safety", type=float, default=0.05, help="Safety factor for the default step")
    group.add_argument("--cap", type=float, default=None, help="Hard time cap T_max")
    group.add_argument("--bridge", action="store_true", help="Brownian-bridge crossing correction")


def policy_from_args(args: argparse.Namespace) -> StepPolicy:
    return StepPolicy(dt=args.dt, safety=args.safety, t_max=args.cap, bridge_correction=args.bridge)


def add_output_argument(parser: argparse.ArgumentParser, default: str = "-") -> None:
    parser.add_argument("--out", default=default, help="Output CSV path, '-' for standard output")


def add_seed_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="Master seed (non-negative)")


def options_from_args(args: argparse.Namespace, skip: Iterable[str] = ()) -> Dict[str, Any]:
    skip = set(skip) | _NOT_ECHOED
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and not callable(v)}


def run_config(args: argparse.Namespace, **parts: Any) -> RunConfig:
    """RunConfig echoing every flag of the invocation except process-level ones."""
    outputs = {"out": args.out} if getattr(args, "out", None) else {}
    return RunConfig(
        command=args.command,
        seed=getattr(args, "seed", None),
        outputs=outputs,
        options=options_from_args(args, skip=("out",)),
        **parts,
    )


def report_lines(values: Dict[str, Any], to_stderr: bool) -> None:
    """Print key=value diagnostics; kept off stdout when stdout carries the CSV."""
    stream = sys.stderr if to_stderr else sys.stdout
    for key, value in values.items():
        print(f"{key}={value}", file=stream)
