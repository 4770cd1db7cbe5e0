"""
Stochastic Dynamics

Euler-Maruyama simulation of dX = A v(X) dt + sqrt(kappa) M dB on the unit torus, on the
eps-torus and lifted to the plane. Paths are integrated in chunks by a numba kernel on
lifted coordinates; torus trajectories are the lifted path reduced mod the period.
Stop conditions inspect each chunk with the vectorized detectors of ``stopping``.
"""

import logging
import math
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numba import njit
from scipy import stats

from cellmix.config import defaults
from cellmix.config.settings import get_settings
from cellmix.exceptions import CapExceeded, CellmixValidationError
from cellmix.models.params import FlowParams, PlanePoint, StepPolicy, TorusPoint, cells_per_side
from cellmix.models.results import CrossingEvent, FitResult, StopRecord
from cellmix.services import stopping
from cellmix.services.flowfield import CutoffProfile, gradient_bound, velocity_point
from cellmix.services.rng import RngStream

logger = logging.getLogger(__name__)

State = Union[TorusPoint, PlanePoint, np.ndarray]

IDENTITY = np.eye(2)


@njit(cache=True)
def em_chunk(x0, z, dt, sigma, m, eps, amp, inner, outer):
    """Integrate len(z) Euler-Maruyama steps from x0 on lifted coordinates."""
    steps = z.shape[0]
    path = np.empty((steps + 1, 2))
    path[0, 0] = x0[0]
    path[0, 1] = x0[1]
    x1 = x0[0]
    x2 = x0[1]
    for i in range(steps):
        u1, u2 = velocity_point(x1, x2, eps, amp, inner, outer)
        n1 = m[0, 0] * z[i, 0] + m[0, 1] * z[i, 1]
        n2 = m[1, 0] * z[i, 0] + m[1, 1] * z[i, 1]
        x1 = x1 + u1 * dt + sigma * n1
        x2 = x2 + u2 * dt + sigma * n2
        path[i + 1, 0] = x1
        path[i + 1, 1] = x2
    return path


def _reduce(values: np.ndarray, period: float) -> np.ndarray:
    out = np.mod(values, period)
    out[out >= period] = 0.0
    return out


def project_cell(x: State, eps: float) -> State:
    """
    Reduce a point of the unit torus onto the eps-torus.

    Args:
        x: TorusPoint, PlanePoint or array (..., 2)
        eps (float): Cell size with 1/eps integer

    Returns:
        TorusPoint tagged with period eps, or an array for array input
    """
    try:
        cells_per_side(eps)
    except ValueError as e:
        raise CellmixValidationError(str(e))
    if isinstance(x, (TorusPoint, PlanePoint)):
        return TorusPoint(x1=x.x1, x2=x.x2, period=eps)
    return _reduce(np.asarray(x, dtype=float), eps)


def _matrix(transform) -> np.ndarray:
    if transform is None:
        return IDENTITY
    return np.asarray(getattr(transform, "matrix", transform), dtype=float)


def advance(state: State, dt: float, gauss, transform, params: FlowParams, period: Optional[float] = None) -> State:
    """
    One Euler-Maruyama step x + A v(x) dt + sqrt(kappa dt) M gauss.

    TorusPoint states are wrapped into their period; PlanePoint states stay lifted.
    Array states are wrapped when ``period`` is given.
    """
    if dt <= 0:
        raise CellmixValidationError("dt must be positive")
    if isinstance(state, TorusPoint):
        xy = np.array(state.as_tuple())
        period = state.period
    elif isinstance(state, PlanePoint):
        xy = np.array(state.as_tuple())
        period = None
    else:
        xy = np.asarray(state, dtype=float)
    m = _matrix(transform)
    g = np.asarray(gauss, dtype=float)
    u1, u2 = velocity_point(
        float(xy[0]), float(xy[1]), params.epsilon, params.amplitude, params.cutoff_inner, params.cutoff_outer
    )
    noise = math.sqrt(params.kappa * dt) * (m @ g)
    nxt = np.array([xy[0] + u1 * dt + noise[0], xy[1] + u2 * dt + noise[1]])
    if isinstance(state, TorusPoint):
        return TorusPoint(x1=nxt[0], x2=nxt[1], period=period)
    if isinstance(state, PlanePoint):
        return PlanePoint(x1=nxt[0], x2=nxt[1])
    return _reduce(nxt, period) if period else nxt


def default_dt(params: FlowParams, safety: float = defaults.DT_SAFETY) -> float:
    """
    Step resolving the boundary layer of width eps*delta.

    safety * min(eps^2 delta / (A 2 pi g_max), eps^2 delta^2 / kappa); the second term
    equals eps^2/A.
    """
    if safety <= 0:
        raise CellmixValidationError(f"safety factor must be positive, got {safety}")
    if params.amplitude <= 0:
        raise CellmixValidationError("default_dt needs A > 0; pass dt explicitly for the drift-free flow")
    eps = params.epsilon
    delta = params.delta
    g_max = CutoffProfile.from_params(params).g_max()
    advective = eps ** 2 * delta / (params.amplitude * 2.0 * math.pi * g_max)
    diffusive = eps ** 2 * delta ** 2 / params.kappa
    return safety * min(advective, diffusive)


def resolve_dt(params: FlowParams, policy: StepPolicy) -> float:
    if policy.dt is not None:
        return policy.dt
    return default_dt(params, policy.safety)


def resolve_t_max(params: FlowParams, policy: StepPolicy) -> float:
    if policy.t_max is not None:
        return policy.t_max
    return defaults.t_max_for(params.epsilon, params.kappa, params.amplitude)


class Trajectory:
    """
    Sampled path with its time stamps.

    ``states`` are lifted (plane) coordinates; ``period`` tags the torus the path
    lives on (None for the plane).
    """

    def __init__(self, times: np.ndarray, states: np.ndarray, period: Optional[float] = 1.0):
        self.times = np.asarray(times, dtype=float)
        self.states = np.asarray(states, dtype=float)
        self.period = period

    def __len__(self) -> int:
        return len(self.times)

    @property
    def lifted(self) -> np.ndarray:
        return self.states

    def torus_states(self) -> np.ndarray:
        if self.period is None:
            return self.states
        return _reduce(self.states, self.period)

    def projected(self, eps: float) -> np.ndarray:
        return project_cell(self.states, eps)

    def to_frame(self, sample_id: int = 0, stride: int = 1) -> pd.DataFrame:
        xs = self.torus_states()[::stride]
        return pd.DataFrame(
            {
                "sample_id": sample_id,
                "t": self.times[::stride],
                "x1": xs[:, 0],
                "x2": xs[:, 1],
            }
        )


class StopCondition:
    """Base for chunk-wise stop predicates."""

    def check(
        self, times: np.ndarray, path: np.ndarray, ctx: "StepContext"
    ) -> Optional[Tuple[int, Optional[CrossingEvent]]]:
        """Return (step index, refined event) for the first firing step in the chunk."""
        raise NotImplementedError


class StepContext:
    """What a stop condition may need besides the chunk itself."""

    def __init__(self, params: FlowParams, dt: float, policy: StepPolicy, rng: RngStream):
        self.params = params
        self.dt = dt
        self.policy = policy
        self.rng = rng


class TimeReached(StopCondition):
    def __init__(self, t: float):
        self.t = t

    def check(self, times, path, ctx):
        idx = np.nonzero(times >= self.t * (1.0 - 1e-12))[0]
        if idx.size == 0:
            return None
        return int(idx[0]), None


class LineCrossing(StopCondition):
    """Coordinate ``axis`` reaches the lattice offset + spacing * Z."""

    def __init__(self, axis: int, spacing: float, offset: float = 0.0):
        self.axis = axis
        self.spacing = spacing
        self.offset = offset

    def check(self, times, path, ctx):
        return stopping.first_line_hit(times, path, self.spacing, self.axis, self.offset)


class LevelCrossing(StopCondition):
    """H(X) - level changes sign (or, with the bridge correction, a likely excursion)."""

    def __init__(self, level: float):
        self.level = level

    def check(self, times, path, ctx):
        uniforms = ctx.rng.uniforms(len(times) - 1) if ctx.policy.bridge_correction else None
        return stopping.first_level_hit(times, path, self.level, ctx.params, uniforms=uniforms)


class BandEntry(StopCondition):
    """First time |H(X)| <= width (entry into the boundary layer)."""

    def __init__(self, width: float):
        self.width = width

    def check(self, times, path, ctx):
        return stopping.first_band_entry(times, path, self.width, ctx.params)


class Predicate(StopCondition):
    """Wrap a vectorized callable f(times, path) -> boolean array over the points."""

    def __init__(self, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]):
        self.fn = fn

    def check(self, times, path, ctx):
        hits = np.nonzero(np.asarray(self.fn(times, path), dtype=bool))[0]
        if hits.size == 0:
            return None
        return int(hits[0]), None


class Never(StopCondition):
    def check(self, times, path, ctx):
        return None


Observer = Callable[[np.ndarray, np.ndarray], None]


def simulate_until(
    x0,
    stop: StopCondition,
    params: FlowParams,
    policy: StepPolicy,
    rng: RngStream,
    period: Optional[float] = 1.0,
    transform=None,
    record: bool = True,
    stride: int = 1,
    observers: Sequence[Observer] = (),
    raise_on_cap: bool = True,
    t0: float = 0.0,
) -> Tuple[Trajectory, StopRecord]:
    """
    Simulate from ``x0`` until ``stop`` fires.

    Args:
        x0: Starting point (TorusPoint, PlanePoint or pair of floats)
        stop (StopCondition): Chunk-wise stopping condition
        params (FlowParams): Flow parameters
        policy (StepPolicy): Step size, cap and bridge-correction flag
        rng (RngStream): Noise stream; its counter advances by exactly the steps taken
        period (Optional[float]): Torus period for the returned trajectory, None for the plane
        transform: Noise transform matrix (identity when None)
        record (bool): Keep the sampled path (every ``stride``-th step)
        observers: Callables fed every integrated chunk (times, lifted states)
        raise_on_cap (bool): Raise CapExceeded at T_max instead of returning a capped record
        t0 (float): Time stamp of the starting point

    Returns:
        Tuple[Trajectory, StopRecord]: The path and the stop record

    Raises:
        CapExceeded: When T_max elapses first and ``raise_on_cap`` is set
    """
    dt = resolve_dt(params, policy)
    t_max = resolve_t_max(params, policy)
    m = _matrix(transform)
    sigma = math.sqrt(params.kappa * dt)
    chunk = get_settings().chunk_steps
    cap_steps = int(math.ceil(t_max / dt * (1.0 - 1e-12)))
    ctx = StepContext(params, dt, policy, rng)

    if isinstance(x0, (TorusPoint, PlanePoint)):
        x = np.array(x0.as_tuple(), dtype=float)
    else:
        x = np.array(x0, dtype=float)

    kept_t: List[np.ndarray] = []
    kept_x: List[np.ndarray] = []
    step = 0

    first = stop.check(np.array([t0]), x[None, :], ctx)
    if first is not None:
        _, event = first
        traj = Trajectory(np.array([t0]), x[None, :].copy(), period)
        return traj, StopRecord(time=event.time if event else t0, steps=0, event=event, location=tuple(x))

    while step < cap_steps:
        steps = min(chunk, cap_steps - step)
        counter = rng.counter
        z = rng.normals(steps)[:, :2]
        path = em_chunk(x, np.ascontiguousarray(z), dt, sigma, m, params.epsilon, params.amplitude,
                        params.cutoff_inner, params.cutoff_outer)
        times = t0 + (step + np.arange(steps + 1)) * dt
        hit = stop.check(times, path, ctx)
        if hit is not None:
            idx, event = hit
            idx = max(int(idx), 1)
            rng.rewind(counter + idx)
            times, path = times[:idx + 1], path[:idx + 1]
        for observe in observers:
            observe(times, path)
        if record:
            kept_t.append(times[1:] if kept_t else times)
            kept_x.append(path[1:] if kept_x else path)
        step += len(times) - 1
        x = path[-1].copy()
        if hit is not None:
            traj = _assemble(kept_t, kept_x, x, times[-1], period, stride)
            event_time = event.time if event is not None else float(times[-1])
            logger.debug(f"Stop fired at t={event_time:.6g} after {step} steps")
            return traj, StopRecord(time=event_time, steps=step, event=event, location=tuple(path[-1]))

    elapsed = step * dt
    traj = _assemble(kept_t, kept_x, x, t0 + elapsed, period, stride)
    if raise_on_cap:
        logger.warning(f"⚠️ Cap reached at t={elapsed:.6g} without the stop condition firing")
        err = CapExceeded(t_max, elapsed)
        err.trajectory = traj
        raise err
    return traj, StopRecord(time=t0 + elapsed, steps=step, event=None, location=tuple(x), capped=True)


def _assemble(kept_t, kept_x, x, t_end, period, stride) -> Trajectory:
    if not kept_t:
        return Trajectory(np.array([t_end]), x[None, :].copy(), period)
    times = np.concatenate(kept_t)
    states = np.concatenate(kept_x)
    if stride > 1:
        keep = np.arange(0, len(times), stride)
        if keep[-1] != len(times) - 1:
            keep = np.append(keep, len(times) - 1)
        times, states = times[keep], states[keep]
    return Trajectory(times, states, period)


def brownian_increments(rng: RngStream, steps: int, dt: float) -> np.ndarray:
    """Brownian increments (steps, 2) with variance dt per coordinate."""
    return rng.normals(steps)[:, :2] * math.sqrt(dt)


def coarsen_increments(increments: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive groups of ``factor`` increments (the same path at a coarser step)."""
    steps = increments.shape[0]
    if steps % factor:
        raise CellmixValidationError("increment count must be divisible by the coarsening factor")
    return increments.reshape(steps // factor, factor, 2).sum(axis=1)


def integrate_increments(x0, increments: np.ndarray, dt: float, params: FlowParams, transform=None) -> np.ndarray:
    """Lifted Euler-Maruyama path driven by prescribed Brownian increments."""
    z = np.ascontiguousarray(increments / math.sqrt(dt))
    return em_chunk(
        np.asarray(x0, dtype=float),
        z,
        dt,
        math.sqrt(params.kappa * dt),
        _matrix(transform),
        params.epsilon,
        params.amplitude,
        params.cutoff_inner,
        params.cutoff_outer,
    )


def strong_order_study(
    params: FlowParams,
    x0,
    t_end: float,
    dt0: float,
    levels: int = 3,
    samples: int = 32,
    seed: int = 0,
) -> Tuple[List[float], List[float], FitResult]:
    """
    Strong error of Euler-Maruyama against the half-step solution on a fixed Brownian path.

    The asymptotic order only shows once dt0 resolves the drift, i.e. dt0 times the
    Jacobian bound of the velocity is well below one; coarser steps are logged.

    Returns:
        (dts, mean errors, log-log fit of error against dt)
    """
    from cellmix.services.experiments import fit_power_law

    stiffness = dt0 * gradient_bound(params)
    if stiffness > 1.0:
        logger.warning(f"⚠️ dt0={dt0} does not resolve the drift (dt0 * |grad u| bound = {stiffness:.3g})")

    fine_steps = int(round(t_end / dt0)) * 2 ** levels
    dt_fine = dt0 / 2 ** levels
    errors = np.zeros(levels)
    for s in range(samples):
        dw = brownian_increments(RngStream(seed, s), fine_steps, dt_fine)
        ends = []
        for lvl in range(levels + 1):
            factor = 2 ** (levels - lvl)
            inc = coarsen_increments(dw, factor) if factor > 1 else dw
            ends.append(integrate_increments(x0, inc, dt_fine * factor, params)[-1])
        for lvl in range(levels):
            errors[lvl] += np.linalg.norm(ends[lvl] - ends[lvl + 1])
    errors /= samples
    dts = [dt0 / 2 ** lvl for lvl in range(levels)]
    fit = fit_power_law(dts[::-1], list(errors[::-1]))
    return dts, list(errors), fit


def occupation_chi2(states: np.ndarray, eps: float, bins: int = 16) -> Tuple[float, float]:
    """
    Chi-square statistic and p-value of the eps-torus occupation against uniform.

    Args:
        states (np.ndarray): Points (n, 2), lifted or on the torus
        eps (float): Cell size
        bins (int): Bins per side

    Returns:
        Tuple[float, float]: (statistic, p-value)
    """
    y = project_cell(np.asarray(states, dtype=float), eps)
    counts, _, _ = np.histogram2d(y[:, 0], y[:, 1], bins=bins, range=[[0, eps], [0, eps]])
    result = stats.chisquare(counts.ravel())
    return float(result.statistic), float(result.pvalue)


def uniform_starts(rng: RngStream, count: int, period: float = 1.0) -> np.ndarray:
    return rng.uniforms(2 * count).reshape(count, 2) * period


def run_many(
    starts: Iterable,
    stop_factory: Callable[[], StopCondition],
    params: FlowParams,
    policy: StepPolicy,
    seed: int,
    record: bool = True,
) -> List[Tuple[Trajectory, StopRecord]]:
    """Independent trajectories, one RNG stream per start point."""
    out = []
    for i, x0 in enumerate(starts):
        out.append(simulate_until(x0, stop_factory(), params, policy, RngStream(seed, i), record=record))
    return out
