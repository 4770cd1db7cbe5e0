"""
Stopping Times

Crossing detectors and separatrix clocks. Detectors work on a chunk of consecutive path
points (times (m+1,), lifted states (m+1, 2)) and return the first event with its time
refined inside the step. ``ClockBuilder`` is a streaming fold over such chunks that
produces the boundary-layer clock (sigma_n, tau_n), the axis subsequences tau_n^i and the
diagonal-return clock.
"""

import logging
from typing import Callable, Iterable, List, Optional, Tuple

import numpy as np
from scipy import optimize

from cellmix.config import defaults
from cellmix.exceptions import StepTooLarge
from cellmix.models.params import FlowParams
from cellmix.models.results import CrossingEvent, StoppingClock

logger = logging.getLogger(__name__)

Hit = Optional[Tuple[int, Optional[CrossingEvent]]]
PointFn = Callable[[np.ndarray], np.ndarray]


def _stream(points: np.ndarray, params: FlowParams) -> np.ndarray:
    k = params.wavenumber
    eps = params.epsilon
    return np.sin(k * np.mod(points[..., 0], eps)) * np.sin(k * np.mod(points[..., 1], eps))


def _stream_grad(point: np.ndarray, params: FlowParams) -> np.ndarray:
    k = params.wavenumber
    y = np.mod(point, params.epsilon)
    return k * np.array([np.cos(k * y[0]) * np.sin(k * y[1]), np.sin(k * y[0]) * np.cos(k * y[1])])


def _refine_on_segment(fn: PointFn, xa: np.ndarray, xb: np.ndarray) -> Tuple[float, np.ndarray]:
    """Root of fn on the segment xa -> xb; fn(xa) and fn(xb) must bracket zero."""
    def along(s: float) -> float:
        return float(fn((xa + s * (xb - xa))[None, :])[0])

    fa, fb = along(0.0), along(1.0)
    if fa == 0.0:
        return 0.0, xa.copy()
    if fb == 0.0 or (fa > 0) == (fb > 0):
        return 1.0, xb.copy()
    s = optimize.brentq(along, 0.0, 1.0, xtol=1e-15, maxiter=defaults.ROOT_MAX_ITER, disp=False)
    return s, xa + s * (xb - xa)


def _check_step(path: np.ndarray, axis: int, spacing: float) -> None:
    if len(path) < 2:
        return
    jumps = np.abs(np.diff(path[:, axis - 1]))
    worst = float(jumps.max())
    if worst >= spacing / 2.0:
        raise StepTooLarge(worst, spacing / 2.0)


def _line_event(times, path, k, s, spacing, axis, offset) -> CrossingEvent:
    t = times[k - 1] + s * (times[k] - times[k - 1])
    loc = path[k - 1] + s * (path[k] - path[k - 1])
    line = int(np.round((loc[axis - 1] - offset) / spacing))
    loc = loc.copy()
    loc[axis - 1] = offset + line * spacing
    kind = "vertical-line" if axis == 1 else "horizontal-line"
    return CrossingEvent(time=float(t), location=(float(loc[0]), float(loc[1])), kind=kind, index=line)


def first_line_hit(
    times: np.ndarray, path: np.ndarray, spacing: float, axis: int, offset: float = 0.0
) -> Hit:
    """
    First time coordinate ``axis`` reaches offset + spacing * Z within a chunk.

    Returns (index of the step end, event) or None.

    Raises:
        StepTooLarge: A step moved the coordinate by spacing/2 or more
    """
    _check_step(path, axis, spacing)
    f = (path[:, axis - 1] - offset) / spacing
    on_line = np.abs(f - np.round(f)) <= 1e-12 * np.maximum(1.0, np.abs(f))
    cells = np.floor(f)
    crossing = np.zeros(len(f), dtype=bool)
    crossing[1:] = cells[1:] != cells[:-1]

    on_idx = np.flatnonzero(on_line)
    cr_idx = np.flatnonzero(crossing)
    first_on = int(on_idx[0]) if on_idx.size else None
    first_cr = int(cr_idx[0]) if cr_idx.size else None
    if first_on is None and first_cr is None:
        return None
    if first_cr is None or (first_on is not None and first_on < first_cr):
        j = first_on
        loc = path[j].copy()
        line = int(np.round(f[j]))
        loc[axis - 1] = offset + line * spacing
        kind = "vertical-line" if axis == 1 else "horizontal-line"
        return j, CrossingEvent(time=float(times[j]), location=(float(loc[0]), float(loc[1])), kind=kind, index=line)
    k = first_cr
    # the crossed line lies between the two cell indices
    line = max(cells[k - 1], cells[k])
    denom = f[k] - f[k - 1]
    s = float(np.clip((line - f[k - 1]) / denom, 0.0, 1.0)) if denom != 0 else 0.0
    return k, _line_event(times, path, k, s, spacing, axis, offset)


def detect_line_hit(
    x_prev, x_next, t_prev: float, dt: float, spacing: float, axis: int, offset: float = 0.0
) -> Optional[CrossingEvent]:
    """
    Lattice-line crossing on a single step segment.

    Args:
        x_prev, x_next: Step end points
        t_prev (float): Time of x_prev
        dt (float): Step length
        spacing (float): Lattice spacing (eps/2 for cell boundaries)
        axis (int): 1 for vertical lines, 2 for horizontal lines
        offset (float): Lattice offset

    Returns:
        Optional[CrossingEvent]: The event, or None when the segment stays in one lattice cell
    """
    path = np.array([x_prev, x_next], dtype=float)
    times = np.array([t_prev, t_prev + dt])
    hit = first_line_hit(times, path, spacing, axis, offset)
    return hit[1] if hit else None


def _level_event(times, path, k, level, params) -> CrossingEvent:
    def fn(p):
        return _stream(p, params) - level

    s, loc = _refine_on_segment(fn, path[k - 1], path[k])
    t = times[k - 1] + s * (times[k] - times[k - 1])
    h_prev = _stream(path[k - 1:k], params)[0]
    h_next = _stream(path[k:k + 1], params)[0]
    if level == 0.0:
        loc = _snap_to_separatrix(loc, params)
        kind = "separatrix"
    else:
        kind = "level-up" if h_next > h_prev else "level-down"
    return _event(t, loc, kind, int(np.sign(level)))


def _event(t: float, loc: np.ndarray, kind: str, index: int = 0) -> CrossingEvent:
    return CrossingEvent(time=float(t), location=(float(loc[0]), float(loc[1])), kind=kind, index=index)


def _snap_to_separatrix(loc: np.ndarray, params: FlowParams) -> np.ndarray:
    """Move the vanishing coordinate onto the eps/2 lattice."""
    half = params.epsilon / 2.0
    k = params.wavenumber
    y = np.mod(loc, params.epsilon)
    out = loc.copy()
    factors = np.abs(np.sin(k * y))
    tol = defaults.LATTICE_TOLERANCE * params.epsilon
    for i in (0, 1):
        nearest = half * np.round(loc[i] / half)
        if factors[i] <= factors[1 - i] or abs(loc[i] - nearest) <= tol:
            out[i] = nearest
    return out


def first_level_hit(
    times: np.ndarray, path: np.ndarray, level: float, params: FlowParams, uniforms: Optional[np.ndarray] = None
) -> Hit:
    """
    First sign change of H(X) - level within a chunk.

    With ``uniforms`` (one per step), steps without a sign change are accepted as
    crossings with the Brownian-bridge probability exp(-2ab/(kappa dt)), a and b the
    endpoint distances to the level in the linearized level coordinate.
    """
    values = _stream(path, params) - level
    if values[0] == 0.0:
        loc = path[0] if level != 0.0 else _snap_to_separatrix(path[0], params)
        kind = "separatrix" if level == 0.0 else "level-up"
        return 0, _event(times[0], loc, kind, int(np.sign(level)))
    if len(values) < 2:
        return None
    prev, nxt = values[:-1], values[1:]
    change = (prev * nxt < 0) | ((nxt == 0) & (prev != 0))
    idx = np.flatnonzero(change)
    first = int(idx[0]) + 1 if idx.size else None

    if uniforms is not None:
        bridge = _bridge_hits(times, path, values, level, params, uniforms)
        if bridge is not None and (first is None or bridge[0] < first):
            return bridge
    if first is None:
        return None
    return first, _level_event(times, path, first, level, params)


def _bridge_hits(times, path, values, level, params, uniforms) -> Hit:
    grads = np.array([np.linalg.norm(_stream_grad(p, params)) for p in path])
    dist = np.abs(values) / np.maximum(grads, 1e-300)
    a, b = dist[:-1], dist[1:]
    dt = np.diff(times)
    same_side = values[:-1] * values[1:] > 0
    prob = np.where(same_side, np.exp(-2.0 * a * b / (params.kappa * dt)), 0.0)
    accepted = np.flatnonzero(uniforms[: len(prob)] < prob)
    if accepted.size == 0:
        return None
    k = int(accepted[0]) + 1
    w = a[k - 1] / (a[k - 1] + b[k - 1]) if a[k - 1] + b[k - 1] > 0 else 0.5
    t = times[k - 1] + w * dt[k - 1]
    loc = path[k - 1] + w * (path[k] - path[k - 1])
    loc = _newton_to_level(loc, level, params)
    if level == 0.0:
        kind = "separatrix"
    else:
        kind = "level-up" if values[k - 1] < 0 else "level-down"
    return k, _event(t, loc, kind, int(np.sign(level)))


def _newton_to_level(loc: np.ndarray, level: float, params: FlowParams) -> np.ndarray:
    x = loc.copy()
    for _ in range(20):
        r = float(_stream(x[None, :], params)[0]) - level
        if abs(r) <= defaults.LEVEL_TOLERANCE:
            break
        g = _stream_grad(x, params)
        x = x - r * g / max(float(g @ g), 1e-300)
    if level == 0.0:
        x = _snap_to_separatrix(x, params)
    return x


def detect_level_hit(
    x_prev, x_next, t_prev: float, dt: float, level: float, params: FlowParams,
    bridge_uniform: Optional[float] = None,
) -> Optional[CrossingEvent]:
    """
    Level-set crossing of H on a single step segment.

    Args:
        x_prev, x_next: Step end points
        t_prev (float): Time of x_prev
        dt (float): Step length
        level (float): Level c of H
        params (FlowParams): Flow parameters
        bridge_uniform (Optional[float]): Uniform draw enabling the Brownian-bridge correction

    Returns:
        Optional[CrossingEvent]: The refined event, or None
    """
    path = np.array([x_prev, x_next], dtype=float)
    times = np.array([t_prev, t_prev + dt])
    uniforms = None if bridge_uniform is None else np.array([bridge_uniform])
    hit = first_level_hit(times, path, level, params, uniforms=uniforms)
    return hit[1] if hit else None


def first_band_entry(times: np.ndarray, path: np.ndarray, width: float, params: FlowParams) -> Hit:
    """First time |H(X)| <= width."""
    values = np.abs(_stream(path, params)) - width
    inside = np.flatnonzero(values <= 0)
    if inside.size == 0:
        return None
    j = int(inside[0])
    if j == 0:
        return 0, _event(times[0], path[0], "level-down")

    def fn(p):
        return np.abs(_stream(p, params)) - width

    s, loc = _refine_on_segment(fn, path[j - 1], path[j])
    t = times[j - 1] + s * (times[j] - times[j - 1])
    return j, CrossingEvent(time=float(t), location=(float(loc[0]), float(loc[1])), kind="level-down", index=0)


def _diagonal_values(path: np.ndarray, params: FlowParams) -> Tuple[np.ndarray, np.ndarray]:
    k = params.wavenumber
    return np.sin(k * (path[:, 1] - path[:, 0])), np.sin(k * (path[:, 1] + path[:, 0]))


def _sign_changes(values: np.ndarray) -> np.ndarray:
    """Boolean per segment end k >= 1: the value changed sign or reached zero."""
    out = np.zeros(len(values), dtype=bool)
    prev, nxt = values[:-1], values[1:]
    out[1:] = (prev * nxt < 0) | ((nxt == 0) & (prev != 0))
    return out


class ClockBuilder:
    """
    Streaming fold producing a StoppingClock from consecutive path chunks.

    Phases alternate between waiting for a separatrix hit (tau) and waiting for an
    exit from the boundary layer |H| < delta (sigma); the first hit is tau0.
    """

    def __init__(self, params: FlowParams, delta: Optional[float] = None, diagonals: bool = True):
        if delta is None:
            delta = params.delta
        if delta is None:
            raise ValueError("the boundary-layer clock needs A > 0 or an explicit delta")
        self.params = params
        self.delta = delta
        self.diagonals = diagonals
        self.clock = StoppingClock()
        self._waiting_tau = True
        self._diag_armed = False
        self._started = False

    def axis_count(self, axis: int) -> int:
        return len(self.clock.tau_axis[axis])

    def update(
        self, times: np.ndarray, path: np.ndarray, stop_when: Optional[Callable[["ClockBuilder"], bool]] = None
    ) -> Optional[int]:
        """
        Fold one chunk. Consecutive chunks share their boundary point.

        Returns the index of the step end at which ``stop_when`` first became true.
        """
        params = self.params
        h = _stream(path, params)
        if not self._started:
            self._started = True
            if abs(h[0]) <= self.delta:
                self.clock.entry_time = float(times[0])
            if h[0] == 0.0:
                loc = _snap_to_separatrix(path[0], params)
                self._record_tau(_event(times[0], loc, "separatrix"))
                self._waiting_tau = False
                if stop_when is not None and stop_when(self):
                    return 0
        if len(times) < 2:
            return None

        if self.clock.entry_time is None:
            inside = np.flatnonzero(np.abs(h) <= self.delta)
            if inside.size:
                hit = first_band_entry(times, path, self.delta, params)
                self.clock.entry_time = hit[1].time

        zero_idx = np.flatnonzero(_sign_changes(h))
        absdiff = np.abs(h) - self.delta
        exit_mask = np.zeros(len(h), dtype=bool)
        exit_mask[1:] = (absdiff[:-1] < 0) & (absdiff[1:] >= 0)
        exit_idx = np.flatnonzero(exit_mask)
        if self.diagonals:
            dm, dp = _diagonal_values(path, params)
            diag_idx = np.flatnonzero(_sign_changes(dm) | _sign_changes(dp))
        else:
            diag_idx = np.empty(0, dtype=int)

        pos = 1
        diag_pos = 1
        while pos < len(h):
            if self._waiting_tau:
                cand = zero_idx[np.searchsorted(zero_idx, pos):]
                if cand.size == 0:
                    break
                k = int(cand[0])
                if self.diagonals and not self._diag_armed:
                    d = diag_idx[np.searchsorted(diag_idx, diag_pos):]
                    if d.size and d[0] <= k:
                        self._diag_armed = True
                diag_pos = k + 1
                event = _level_event(times, path, k, 0.0, params)
                self._record_tau(event)
                self._waiting_tau = False
                if stop_when is not None and stop_when(self):
                    self.clock.end_time = float(times[k])
                    return k
                pos = k + 1
            else:
                cand = exit_idx[np.searchsorted(exit_idx, pos):]
                if cand.size == 0:
                    break
                k = int(cand[0])

                def fn(p, delta=self.delta):
                    return np.abs(_stream(p, params)) - delta

                s, loc = _refine_on_segment(fn, path[k - 1], path[k])
                t = times[k - 1] + s * (times[k] - times[k - 1])
                h_loc = float(_stream(loc[None, :], params)[0])
                kind = "level-up" if h_loc > 0 else "level-down"
                self.clock.sigma_seq.append(_event(t, loc, kind, 1 if h_loc > 0 else -1))
                self._waiting_tau = True
                pos = k + 1
        if self.diagonals and not self._diag_armed:
            d = diag_idx[np.searchsorted(diag_idx, diag_pos):]
            if d.size:
                self._diag_armed = True
        self.clock.end_time = float(times[-1])
        return None

    def _record_tau(self, event: CrossingEvent) -> None:
        if self.clock.tau0 is None:
            self.clock.tau0 = event
            self._diag_armed = False
            return
        self.clock.tau_seq.append(event)
        eps = self.params.epsilon
        for axis in (1, 2):
            if _on_lattice(event.location[axis - 1], eps):
                self.clock.tau_axis[axis].append(event)
        if self.diagonals and self._diag_armed:
            self.clock.tau_check_seq.append(event)
            self._diag_armed = False

    def finish(self, capped: bool = False) -> StoppingClock:
        self.clock.capped = capped
        return self.clock


def _on_lattice(coord: float, eps: float) -> bool:
    half = eps / 2.0
    return abs(coord - half * round(coord / half)) <= defaults.LATTICE_TOLERANCE * eps


def _chunks(trajectory) -> Iterable[Tuple[np.ndarray, np.ndarray]]:
    if hasattr(trajectory, "times") and hasattr(trajectory, "states"):
        return [(trajectory.times, trajectory.states)]
    return trajectory


def boundary_layer_clock(trajectory, params: FlowParams, capped: bool = False) -> StoppingClock:
    """
    Exits from B_delta and returns to {H = 0} along a trajectory.

    Args:
        trajectory: A Trajectory (lifted states) or an iterable of (times, states) chunks
        params (FlowParams): Flow parameters (A > 0)
        capped (bool): Mark the clock as ended by the time cap

    Returns:
        StoppingClock: tau0, sigma_seq, tau_seq and the axis subsequences
    """
    builder = ClockBuilder(params, diagonals=False)
    for times, states in _chunks(trajectory):
        builder.update(times, states)
    return builder.finish(capped)


def axis_filtered_returns(clock: StoppingClock, axis: int, eps: float) -> List[CrossingEvent]:
    """Returns tau_n^i: separatrix returns whose coordinate ``axis`` lies on the eps/2 lattice."""
    if axis not in (1, 2):
        raise ValueError("axis must be 1 or 2")
    return [e for e in clock.tau_seq if _on_lattice(e.location[axis - 1], eps)]


def diagonal_return_clock(trajectory, params: FlowParams) -> List[CrossingEvent]:
    """Separatrix returns that follow a crossing of a cell diagonal x2 = +-x1 + (eps/2) Z."""
    builder = ClockBuilder(params, diagonals=True)
    for times, states in _chunks(trajectory):
        builder.update(times, states)
    return builder.finish().tau_check_seq


class ClockStop:
    """Stop condition for ``sde.simulate_until`` that feeds a ClockBuilder."""

    def __init__(self, builder: ClockBuilder, stop_when: Callable[[ClockBuilder], bool]):
        self.builder = builder
        self.stop_when = stop_when

    def check(self, times, path, ctx):
        if len(times) < 2 and self.builder._started:
            return None
        idx = self.builder.update(times, path, stop_when=self.stop_when)
        if idx is None:
            return None
        return idx, None
