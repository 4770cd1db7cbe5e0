"""
Parameter Models

Pydantic models for the inputs of every operation: flow parameters, points, step policy,
spectral solver configuration, regime thresholds, sweep specifications and the run
configuration echoed into output headers.
"""

import json
import math
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, root_validator, validator

from cellmix.config import defaults


def cells_per_side(epsilon: float) -> int:
    """Return m = 1/epsilon, rejecting cell sizes that do not tile the unit torus."""
    if epsilon <= 0 or epsilon > 1:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")
    m = round(1.0 / epsilon)
    if m < 1 or abs(m * epsilon - 1.0) > 1e-9:
        raise ValueError(f"1/epsilon must be a positive integer, got 1/{epsilon} = {1.0 / epsilon}")
    return m


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


class FlowParams(BaseModel):
    """
    The parameter triple (epsilon, A, kappa) of the cellular flow.

    Attributes:
        epsilon (float): Cell size as a fraction of the unit torus side
        amplitude (float): Flow amplitude A
        kappa (float): Molecular diffusivity
        cutoff_inner (float): Stream level where the cutoff starts to decay
        cutoff_outer (float): Stream level where the cutoff reaches zero
    """

    epsilon: float = Field(..., description="Cell size, 1/epsilon integer", example=0.125)
    amplitude: float = Field(..., description="Flow amplitude A", ge=0, example=100.0)
    kappa: float = Field(..., description="Molecular diffusivity", gt=0, example=0.01)
    cutoff_inner: float = Field(defaults.CUTOFF_INNER, description="Cutoff plateau edge", gt=0)
    cutoff_outer: float = Field(defaults.CUTOFF_OUTER, description="Cutoff support edge", le=1)

    @validator("epsilon")
    def validate_epsilon(cls, v):
        cells_per_side(v)
        return v

    @validator("cutoff_outer")
    def validate_cutoff_levels(cls, v, values):
        inner = values.get("cutoff_inner")
        if inner is not None and not inner < v:
            raise ValueError("cutoff_inner must be smaller than cutoff_outer")
        return v

    @property
    def delta(self) -> Optional[float]:
        """Boundary-layer width sqrt(kappa/A); undefined for the drift-free flow."""
        if self.amplitude <= 0:
            return None
        return math.sqrt(self.kappa / self.amplitude)

    @property
    def cells(self) -> int:
        return cells_per_side(self.epsilon)

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi / self.epsilon

    def with_amplitude(self, amplitude: float) -> "FlowParams":
        return self.copy(update={"amplitude": amplitude})

    class Config:
        """Pydantic configuration."""
        allow_mutation = False
        frozen = True
        schema_extra = {
            "example": {"epsilon": 0.125, "amplitude": 100.0, "kappa": 0.01}
        }


class TorusPoint(BaseModel):
    """A point on the unit torus (period 1) or on the eps-torus (period eps)."""

    x1: float
    x2: float
    period: float = Field(1.0, gt=0)

    @root_validator
    def reduce_coordinates(cls, values):
        period = values.get("period")
        if period is None or "x1" not in values or "x2" not in values:
            return values
        values["x1"] = math.fmod(values["x1"], period)
        values["x2"] = math.fmod(values["x2"], period)
        if values["x1"] < 0:
            values["x1"] += period
        if values["x2"] < 0:
            values["x2"] += period
        # fmod of values just below a multiple of the period can round up to it
        if values["x1"] >= period:
            values["x1"] = 0.0
        if values["x2"] >= period:
            values["x2"] = 0.0
        return values

    def as_tuple(self):
        return (self.x1, self.x2)


class PlanePoint(BaseModel):
    """A point of the lifted process on the plane."""

    x1: float
    x2: float

    def to_torus(self) -> TorusPoint:
        return TorusPoint(x1=self.x1, x2=self.x2)

    def as_tuple(self):
        return (self.x1, self.x2)


class StepPolicy(BaseModel):
    """
    Euler-Maruyama step policy.

    ``dt=None`` resolves to the boundary-layer step from ``sde.default_dt``;
    ``t_max=None`` resolves to the cap from ``defaults.t_max_for``.
    """

    dt: Optional[float] = Field(None, description="Explicit time step", gt=0)
    safety: float = Field(defaults.DT_SAFETY, description="Safety factor c_dt", gt=0)
    bridge_correction: bool = Field(False, description="Brownian-bridge crossing correction")
    t_max: Optional[float] = Field(None, description="Hard time cap", gt=0)

    class Config:
        allow_mutation = False
        frozen = True


class SolverConfig(BaseModel):
    """Pseudospectral solver configuration."""

    n: int = Field(128, description="Modes per dimension, power of two", ge=8)
    dt: Optional[float] = Field(None, description="Time step; CFL-derived when omitted", gt=0)
    dealias: bool = Field(True, description="2/3-rule dealiasing")
    resolution_guard: bool = Field(True, description="Require n*eps*delta >= points_per_layer")
    points_per_layer: float = Field(defaults.POINTS_PER_LAYER, gt=0)
    probes: int = Field(defaults.TDISS_PROBES, description="Random probes for t_diss", ge=1)
    power_iterations: int = Field(defaults.POWER_ITERATIONS, ge=0)
    seed: int = Field(0, description="Seed for random probes", ge=0)
    scheme: str = Field("rk4", description="Advection scheme with the diffusion integrating factor: rk4 or midpoint")

    @validator("n")
    def validate_n(cls, v):
        if not _is_power_of_two(v):
            raise ValueError(f"n must be a power of two, got {v}")
        return v

    @validator("scheme")
    def validate_scheme(cls, v):
        if v not in ("rk4", "midpoint"):
            raise ValueError(f"scheme must be rk4 or midpoint, got {v}")
        return v

    class Config:
        allow_mutation = False
        frozen = True


class RegimeThresholds(BaseModel):
    """Operational meaning of the strict-separation hypotheses."""

    separation_factor: float = Field(defaults.SEPARATION_FACTOR, gt=1)
    enforce_cell_scale: bool = Field(
        False, description="Label points with eps^2/kappa above the limit as out-of-theory"
    )
    cell_scale_limit: float = Field(1.0, gt=0)


ESTIMATORS = ("tau_cpl", "stage12", "stage3v", "tau_check", "t_diss", "t_mix", "deff11")


class SweepSpec(BaseModel):
    """A grid sweep over (epsilon, A, kappa) for one estimator."""

    eps: List[float] = Field(default_factory=list)
    amp: List[float] = Field(default_factory=list)
    kappa: List[float] = Field(default_factory=list)
    estimator: str = Field("tau_cpl")
    samples: int = Field(30, ge=1)
    seed: int = Field(0, ge=0)
    pairs: str = Field("uniform")
    safety: float = Field(defaults.DT_SAFETY, gt=0)
    dt: Optional[float] = Field(None, gt=0)
    allow_out_of_theory: bool = False
    n: int = Field(64, ge=8)
    resolution_guard: bool = True

    @validator("eps", each_item=True)
    def validate_eps(cls, v):
        cells_per_side(v)
        return v

    @validator("estimator")
    def validate_estimator(cls, v):
        if v not in ESTIMATORS:
            raise ValueError(f"unknown estimator {v}; choose from {', '.join(ESTIMATORS)}")
        return v

    @validator("pairs")
    def validate_pairs(cls, v):
        if v not in ("uniform", "grid"):
            raise ValueError("pairs must be 'uniform' or 'grid'")
        return v

    @validator("n")
    def validate_n(cls, v):
        if not _is_power_of_two(v):
            raise ValueError(f"n must be a power of two, got {v}")
        return v

    def points(self) -> List[FlowParams]:
        """Grid points in a fixed (eps, amp, kappa) order."""
        return [
            FlowParams(epsilon=e, amplitude=a, kappa=k)
            for e in self.eps
            for a in self.amp
            for k in self.kappa
        ]

    class Config:
        schema_extra = {
            "example": {
                "eps": [0.0625],
                "amp": [2.0, 8.0, 32.0],
                "kappa": [1e-3],
                "estimator": "tau_cpl",
                "samples": 200,
                "seed": 7,
            }
        }


class RunConfig(BaseModel):
    """Resolved configuration of one CLI invocation, echoed into output headers."""

    command: str
    flow: Optional[FlowParams] = None
    policy: Optional[StepPolicy] = None
    solver: Optional[SolverConfig] = None
    sweep: Optional[SweepSpec] = None
    seed: Optional[int] = None
    outputs: Dict[str, str] = Field(default_factory=dict)
    options: Dict[str, Any] = Field(default_factory=dict)

    def header_json(self) -> str:
        return json.dumps(json.loads(self.json(exclude_none=True)), sort_keys=True)
