"""
Numerical Defaults

Default constants for the flow, the integrator, the coupling and the spectral solver,
plus the canonical parameter points used by the acceptance sweeps.
"""

import math
from typing import Dict

# Cutoff levels of the stream-value cutoff
CUTOFF_INNER = 0.25
CUTOFF_OUTER = 0.5

# Central-difference step for the Jacobian check, relative to eps
GRADIENT_STEP = 1e-7

# Euler-Maruyama step policy
DT_SAFETY = 0.05
T_MAX_FACTOR = 50.0

# Event detection
ROOT_MAX_ITER = 40
LEVEL_TOLERANCE = 1e-10
LATTICE_TOLERANCE = 1e-8  # relative to eps

# Coupling
H0 = 0.9
DEGENERATE_DISTANCE = 1e-14
SYNC_TOLERANCE = 1e-8  # relative to eps
MIRROR_TOLERANCE = 1e-6

# Spectral solver
CFL_LIMIT = 0.5
POINTS_PER_LAYER = 8.0
SOURCE_WIDTH_CELLS = 2.0
TDISS_PROBES = 16
POWER_ITERATIONS = 3
GMRES_RTOL = 1e-8
RELATION_TOLERANCE = 0.05
DIFFUSIVE_DT_FRACTION = 0.01  # of the slowest heat time 1/(2 pi^2 kappa)
TV_THRESHOLD = 0.5
HALVING_CAP_FACTOR = 50.0

# Regime classification
SEPARATION_FACTOR = 10.0

CANONICAL_POINTS: Dict[str, Dict[str, float]] = {
    "regime_I": {"epsilon": 0.25, "kappa": 1e-3, "amplitude": 1e4},
    "regime_II": {"epsilon": 0.125, "kappa": 0.01, "amplitude": 100.0},
    "regime_III": {"epsilon": 0.0625, "kappa": 1e-3, "amplitude": 8.0},
}


def get_canonical_point(name: str) -> Dict[str, float]:
    """
    Get one of the named acceptance parameter points.

    Args:
        name (str): One of ``regime_I``, ``regime_II``, ``regime_III``

    Returns:
        Dict[str, float]: epsilon, kappa, amplitude
    """
    if name not in CANONICAL_POINTS:
        raise KeyError(f"unknown parameter point {name}; choose from {sorted(CANONICAL_POINTS)}")
    return dict(CANONICAL_POINTS[name])


def t_max_for(epsilon: float, kappa: float, amplitude: float) -> float:
    """Hard time cap: T_MAX_FACTOR times the cell-diffusion plus regime-III time scale."""
    scale = epsilon ** 2 / kappa
    if amplitude > 0:
        scale += 1.0 / math.sqrt(kappa * amplitude)
    return T_MAX_FACTOR * scale
