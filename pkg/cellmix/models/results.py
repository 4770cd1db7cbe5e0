"""
Result Models

Pydantic models for the records returned by the services: crossing events and clocks,
coupling outcomes and statistics, field and spectral diagnostics, regime labels, moment
reports and power-law fits.
"""

from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field

EVENT_KINDS = (
    "vertical-line",
    "horizontal-line",
    "level-up",
    "level-down",
    "separatrix",
    "diagonal",
)

STAGES = ("stage1", "stage2v", "stage3v", "stage2h", "stage3h")


class CrossingEvent(BaseModel):
    """
    A refined crossing of a lattice line, a level set of H or a cell diagonal.

    Attributes:
        time (float): Refined event time
        location (Tuple[float, float]): Point at the event
        kind (str): One of EVENT_KINDS
        index (int): Lattice line number, or the sign of the level for level events
    """

    time: float
    location: Tuple[float, float]
    kind: str
    index: int = 0

    class Config:
        allow_mutation = False
        frozen = True


class StoppingClock(BaseModel):
    """Separatrix clocks extracted from one trajectory."""

    entry_time: Optional[float] = Field(None, description="First time |H| <= delta")
    tau0: Optional[CrossingEvent] = Field(None, description="First separatrix hit")
    sigma_seq: List[CrossingEvent] = Field(default_factory=list)
    tau_seq: List[CrossingEvent] = Field(default_factory=list)
    tau_axis: Dict[int, List[CrossingEvent]] = Field(default_factory=lambda: {1: [], 2: []})
    tau_check_seq: List[CrossingEvent] = Field(default_factory=list)
    capped: bool = Field(False, description="Trajectory ended at the time cap")
    end_time: float = 0.0

    def tau_times(self) -> List[float]:
        return [e.time for e in self.tau_seq]

    def sigma_times(self) -> List[float]:
        return [e.time for e in self.sigma_seq]


class StopRecord(BaseModel):
    """Why and when ``simulate_until`` stopped."""

    time: float
    steps: int
    event: Optional[CrossingEvent] = None
    location: Tuple[float, float]
    capped: bool = False


class FieldDiagnostics(BaseModel):
    """Numerical checks of the velocity field on a grid."""

    grid_n: int
    div_residual: float = Field(..., description="max |div u| from the analytic velocity Jacobian")
    gradient_residual: float = Field(
        ..., description="max mismatch of the Jacobian against central differences of u, relative"
    )
    symmetry_residuals: Dict[str, float]
    max_speed: float
    speed_bound: float


class CouplingOutcome(BaseModel):
    """
    Record of one paired run through the staged coupling.

    Attributes:
        stage_durations (Dict[str, float]): Elapsed time per completed stage
        tau_cpl (Optional[float]): Total coupling time when successful
        success (bool): Whether the pair was glued
        failure (Optional[str]): Which stage hit its cap
        glue_positions (Dict[str, List[Tuple[float, float]]]): Both partners at each stage end
        stage1_attempts (int): Independent phases started in stage 1
        reflection_attempts (int): Reflection phases started in stage 1
        mirror_residual (float): Largest mirror-relation residual seen in stage 3
    """

    stage_durations: Dict[str, float] = Field(default_factory=dict)
    tau_cpl: Optional[float] = None
    success: bool = False
    failure: Optional[str] = None
    glue_positions: Dict[str, List[Tuple[float, float]]] = Field(default_factory=dict)
    stage1_attempts: int = 0
    reflection_attempts: int = 0
    mirror_residual: float = 0.0
    observations: Dict[str, List[Tuple[float, float]]] = Field(default_factory=dict)


class CouplingStats(BaseModel):
    """Summary statistics of tau_cpl over independent pairs."""

    n_samples: int
    n_success: int
    failures: int
    mean: float
    median: float
    upper_quartile: float
    se: float
    stage_means: Dict[str, float] = Field(default_factory=dict)
    reflection_success_rate: Optional[float] = Field(
        None, description="Empirical per-attempt reflection success probability"
    )


class RegimeLabel(BaseModel):
    label: str = Field(..., description="I, II, III or out-of-theory")
    margins: Dict[str, float] = Field(default_factory=dict)

    def in_theory(self) -> bool:
        return self.label != "out-of-theory"


class BoundPrediction(BaseModel):
    """Three-regime bound, up to the unknown constant."""

    label: str
    value: float
    averaging: float
    cell_scaled: float = Field(..., description="Averaging form with the log factor scaled by 1/eps")


class MomentReport(BaseModel):
    """Moments of the lifted first coordinate at the vertical separatrix returns."""

    epsilon: float
    n_values: List[int]
    samples: int
    failures: int
    mean_s: List[float]
    mean_s_se: List[float]
    s2: List[float]
    s2_se: List[float]
    s4: List[float]
    s4_se: List[float]
    xi2: List[float] = Field(..., description="E|xi_m|^2 for m = 0..max(n)-1")
    xi2_se: List[float]
    xi4: List[float]
    xi4_se: List[float]

    def jensen_holds(self) -> bool:
        return all(s4 >= s2 * s2 * (1 - 1e-12) for s2, s4 in zip(self.s2, self.s4))


class FitResult(BaseModel):
    slope: float
    intercept: float
    r2: float
    residual_band: float = Field(..., description="Largest absolute log-residual")
    n_points: int


class RelationReport(BaseModel):
    """Dissipation time against three mixing times, with the logarithmic upper bound."""

    t_diss: float
    t_mix: float
    ratio: float = Field(..., description="t_diss / (3 t_mix)")
    log_bound: float = Field(..., description="t_diss ln(1 + 1/(kappa t_diss)), the upper bound up to its constant")
    log_constant: float = Field(..., description="Smallest C with 3 t_mix <= C t_diss ln(1 + 1/(kappa t_diss))")
    violated: bool
