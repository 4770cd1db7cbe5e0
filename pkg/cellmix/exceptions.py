"""
Error hierarchy.

Every error carries a human-readable ``detail`` and the process ``exit_code`` the CLI
returns for it: 1 for validation problems, 2 for runtime failures.
"""

from typing import Optional

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class CellmixError(Exception):
    """Base error with a detail message and the CLI exit code."""

    exit_code = EXIT_RUNTIME

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return self.detail


class CellmixValidationError(CellmixError, ValueError):
    """Invalid argument or configuration."""

    exit_code = EXIT_VALIDATION


class TooFewPoints(CellmixValidationError):
    def __init__(self, count: int, required: int = 3):
        super().__init__(f"power-law fit needs at least {required} points, got {count}")
        self.count = count
        self.required = required


class CapExceeded(CellmixError):
    """A run reached its hard time cap without its stopping condition firing."""

    def __init__(self, t_max: float, elapsed: float, what: str = "stopping condition"):
        super().__init__(f"{what} did not fire before T_max={t_max:.6g} (elapsed {elapsed:.6g})")
        self.t_max = t_max
        self.elapsed = elapsed
        self.what = what


class StepTooLarge(CellmixError):
    def __init__(self, displacement: float, limit: float):
        super().__init__(
            f"step displacement {displacement:.3e} exceeds half the lattice spacing {limit:.3e}; "
            "reduce dt or the safety factor"
        )
        self.displacement = displacement
        self.limit = limit


class DegeneratePair(CellmixError):
    def __init__(self, distance: float):
        super().__init__(f"reflection undefined for coincident points (|y - y~| = {distance:.3e})")
        self.distance = distance


class DesyncDetected(CellmixError):
    """Coupled partners lost a relation that holds exactly in continuum."""

    def __init__(self, residual: float, tolerance: float, stage: str):
        super().__init__(
            f"{stage}: partner relation residual {residual:.3e} exceeds tolerance {tolerance:.3e}"
        )
        self.residual = residual
        self.tolerance = tolerance
        self.stage = stage


class ResolutionGuard(CellmixError):
    def __init__(self, points_per_layer: float, required: float):
        super().__init__(
            f"grid resolves the boundary layer with {points_per_layer:.3g} points, "
            f"need at least {required:.3g}"
        )
        self.points_per_layer = points_per_layer
        self.required = required


class CFLViolation(CellmixError):
    def __init__(self, cfl: float, limit: float = 0.5):
        super().__init__(f"advective CFL number {cfl:.3g} exceeds {limit}")
        self.cfl = cfl
        self.limit = limit


class SolverDiverged(CellmixError):
    def __init__(self, info: int, residual: float = float("nan")):
        super().__init__(f"iterative solver did not converge (info={info}, residual={residual:.3e})")
        self.info = info
        self.residual = residual


class OutOfTheory(CellmixError):
    def __init__(self, label: str):
        super().__init__(f"parameters fall outside the three-regime bound (label: {label})")
        self.label = label
