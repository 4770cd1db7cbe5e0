"""
Staged Coupling

Two copies X, X~ of the diffusion driven by one shared noise stream and brought together
in four stages:

1. projections onto the eps-torus are coupled: independent evolution until both lie in
   the same drift-free core component, then reflection coupling until they meet;
2. synchronous evolution until X^1 reaches the eps/2 lattice;
3. mirror coupling (-B^1, B^2) until X^1 reaches the bisector of the pair;
4. stages 2 and 3 repeated for the second coordinate, after which X~ = X.

Partners are advanced in lockstep on lifted coordinates by a numba kernel; every stage
boundary reduces both onto the unit torus.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from cellmix.config import defaults
from cellmix.config.settings import get_settings
from cellmix.exceptions import CapExceeded, CellmixError, CellmixValidationError, DegeneratePair, DesyncDetected
from cellmix.models.params import FlowParams, StepPolicy
from cellmix.models.results import CouplingOutcome, CouplingStats
from cellmix.services import stopping
from cellmix.services.flowfield import velocity_point
from cellmix.services.rng import RngStream
from cellmix.services.sde import TimeReached, resolve_dt, resolve_t_max, simulate_until

logger = logging.getLogger(__name__)

# Stream used to draw starting pairs, far from the per-pair streams
START_STREAM = 2 ** 62

Pair = Tuple[np.ndarray, np.ndarray]


class NoiseTransform:
    """
    Orthogonal map applied to the shared Gaussian draw for the second partner.

    ``independent`` ignores the matrix and drives the partner with its own draw.
    """

    def __init__(self, matrix: np.ndarray, tag: str):
        self.matrix = np.asarray(matrix, dtype=float)
        self.tag = tag

    @property
    def independent(self) -> bool:
        return self.tag == "independent"

    @classmethod
    def identity(cls) -> "NoiseTransform":
        return cls(np.eye(2), "identity")

    @classmethod
    def independent_noise(cls) -> "NoiseTransform":
        return cls(np.eye(2), "independent")

    @classmethod
    def mirror(cls, axis: int) -> "NoiseTransform":
        m = np.eye(2)
        m[axis - 1, axis - 1] = -1.0
        return cls(m, "mirror-x" if axis == 1 else "mirror-y")

    @classmethod
    def reflection(cls, normal: np.ndarray) -> "NoiseTransform":
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        return cls(np.eye(2) - 2.0 * np.outer(n, n), "reflection")

    def is_orthogonal(self, tol: float = 1e-14) -> bool:
        return bool(np.max(np.abs(self.matrix @ self.matrix.T - np.eye(2))) <= tol)

    def __repr__(self) -> str:
        return f"NoiseTransform(tag={self.tag}, matrix={self.matrix.tolist()})"


def _wrap(d: np.ndarray, period: float) -> np.ndarray:
    """Shortest representative of a displacement on a torus of the given period."""
    return d - period * np.round(d / period)


def reflection_transform(y, y_tilde, period: Optional[float] = None) -> NoiseTransform:
    """
    Reflection I - 2 n n^T across the perpendicular bisector of y and y~.

    Args:
        y, y_tilde: The two points
        period (Optional[float]): Torus period for the shortest displacement

    Raises:
        DegeneratePair: |y - y~| < 1e-14
    """
    d = np.asarray(y, dtype=float) - np.asarray(y_tilde, dtype=float)
    if period is not None:
        d = _wrap(d, period)
    dist = float(np.linalg.norm(d))
    if dist < defaults.DEGENERATE_DISTANCE:
        raise DegeneratePair(dist)
    return NoiseTransform.reflection(d / dist)


class CellRegions:
    """
    Drift-free cores of the quarter cells.

    Q is a quarter cell of side eps/2, U = Q with |H| > 1/2 (where the velocity vanishes)
    and U' = Q with |H| > h0. Each quarter cell of the eps-torus holds one component,
    identified by the signs of sin(2 pi y_i/eps).
    """

    def __init__(self, params: FlowParams, h0: float = defaults.H0, validate: bool = True):
        if not 0.75 < h0 < 1.0:
            raise CellmixValidationError(f"h0 must lie in (3/4, 1), got {h0}")
        if h0 <= params.cutoff_outer:
            raise CellmixValidationError("h0 must exceed the cutoff support level")
        self.params = params
        self.h0 = h0
        self.eps = params.epsilon
        self.k = params.wavenumber
        self.u_level = params.cutoff_outer
        if validate:
            self.validate_square()

    def _h(self, y: np.ndarray) -> np.ndarray:
        y = np.mod(y, self.eps)
        return np.sin(self.k * y[..., 0]) * np.sin(self.k * y[..., 1])

    def quarter(self, y: np.ndarray) -> np.ndarray:
        """Quarter-cell index 0..3 from the signs of sin(2 pi y_i/eps)."""
        y = np.mod(y, self.eps)
        q1 = (y[..., 0] >= self.eps / 2).astype(int)
        q2 = (y[..., 1] >= self.eps / 2).astype(int)
        return 2 * q1 + q2

    def in_u(self, y: np.ndarray) -> np.ndarray:
        return np.abs(self._h(y)) > self.u_level

    def in_u_prime(self, y: np.ndarray) -> np.ndarray:
        return np.abs(self._h(y)) > self.h0

    def same_core(self, y: np.ndarray, y_tilde: np.ndarray) -> np.ndarray:
        """Both points in U' of the same quarter cell."""
        return self.in_u_prime(y) & self.in_u_prime(y_tilde) & (self.quarter(y) == self.quarter(y_tilde))

    def validate_square(self, grid: int = 24) -> None:
        """Check that the square on any pair in U' (side |y - y~|, centred at the midpoint) lies in U."""
        half = self.eps / 2.0
        c = (np.arange(grid) + 0.5) / grid * half
        g1, g2 = np.meshgrid(c, c, indexing="ij")
        pts = np.stack([g1.ravel(), g2.ravel()], axis=-1)
        pts = pts[self.in_u_prime(pts)]
        if len(pts) < 2:
            return
        a = pts[:, None, :]
        b = pts[None, :, :]
        mid = 0.5 * (a + b)
        d = a - b
        r = 0.5 * np.linalg.norm(d, axis=-1, keepdims=True)
        n = np.divide(d, 2.0 * r, out=np.zeros_like(d), where=r > 0)
        perp = np.stack([-n[..., 1], n[..., 0]], axis=-1)
        for s1 in (-1.0, 1.0):
            for s2 in (-1.0, 1.0):
                corner = mid + r * (s1 * n + s2 * perp)
                if not np.all(self._h(corner) > self.u_level):
                    raise CellmixValidationError(
                        f"h0={self.h0} too small: a reflection square leaves the drift-free core"
                    )

    def u_prime_fraction(self, samples: int = 200_000, seed: int = 0) -> float:
        """Monte Carlo estimate of |U'| / |Q|."""
        rng = np.random.default_rng(seed)
        pts = rng.random((samples, 2)) * (self.eps / 2.0)
        return float(np.mean(self.in_u_prime(pts)))

    def pair_probability(self, samples: int = 200_000, seed: int = 0) -> float:
        """Probability that two independent uniform points of the eps-torus share a U' component."""
        frac = self.u_prime_fraction(samples, seed) / 4.0
        return 4.0 * frac * frac


@njit(cache=True)
def pair_chunk(x0, xt0, z, dt, sigma, m, independent, anchored, sign, offset, eps, amp, inner, outer):
    """
    Advance both partners len(z) steps; z has four columns per step.

    With ``anchored`` the partner is reset onto sign * X + offset after every step and
    the third output accumulates the signed gap between its own step and that anchor.
    """
    steps = z.shape[0]
    path = np.empty((steps + 1, 2))
    path_t = np.empty((steps + 1, 2))
    defect = np.zeros((steps + 1, 2))
    path[0, 0] = x0[0]
    path[0, 1] = x0[1]
    path_t[0, 0] = xt0[0]
    path_t[0, 1] = xt0[1]
    x1, x2 = x0[0], x0[1]
    y1, y2 = xt0[0], xt0[1]
    d1, d2 = 0.0, 0.0
    for i in range(steps):
        u1, u2 = velocity_point(x1, x2, eps, amp, inner, outer)
        w1, w2 = velocity_point(y1, y2, eps, amp, inner, outer)
        if independent:
            n1 = z[i, 2]
            n2 = z[i, 3]
        else:
            n1 = m[0, 0] * z[i, 0] + m[0, 1] * z[i, 1]
            n2 = m[1, 0] * z[i, 0] + m[1, 1] * z[i, 1]
        x1 = x1 + u1 * dt + sigma * z[i, 0]
        x2 = x2 + u2 * dt + sigma * z[i, 1]
        y1 = y1 + w1 * dt + sigma * n1
        y2 = y2 + w2 * dt + sigma * n2
        if anchored:
            a1 = sign[0] * x1 + offset[0]
            a2 = sign[1] * x2 + offset[1]
            d1 += y1 - a1
            d2 += y2 - a2
            y1 = a1
            y2 = a2
        path[i + 1, 0] = x1
        path[i + 1, 1] = x2
        path_t[i + 1, 0] = y1
        path_t[i + 1, 1] = y2
        defect[i + 1, 0] = d1
        defect[i + 1, 1] = d2
    return path, path_t, defect


# A pair detector returns (step index, weight in the step, payload) for the first event
PairHit = Optional[Tuple[int, float, str]]
PairDetector = Callable[[np.ndarray, np.ndarray, np.ndarray], PairHit]


class PairRelation:
    """
    Affine relation X~ = sign * X + offset that a synchronous or mirror stage preserves.

    The runner keeps the partner on the relation and feeds the accumulated defect of the
    partner's own steps to ``check``; ``worst`` is the largest defect seen.
    """

    def __init__(self, sign, offset, tolerance: float, stage: str):
        self.sign = np.asarray(sign, dtype=float)
        self.offset = np.asarray(offset, dtype=float)
        self.tolerance = tolerance
        self.stage = stage
        self.carried = np.zeros(2)
        self.worst = 0.0

    @classmethod
    def synchronous(cls, x: np.ndarray, xt: np.ndarray, tolerance: float, stage: str) -> "PairRelation":
        return cls(np.ones(2), xt - x, tolerance, stage)

    @classmethod
    def mirror(cls, x: np.ndarray, xt: np.ndarray, axis: int, tolerance: float, stage: str) -> "PairRelation":
        sign = np.ones(2)
        sign[axis - 1] = -1.0
        return cls(sign, xt - sign * x, tolerance, stage)

    def check(self, defect: np.ndarray) -> None:
        total = self.carried + defect
        residual = float(np.max(np.abs(total))) if total.size else 0.0
        self.worst = max(self.worst, residual)
        if residual > self.tolerance:
            raise DesyncDetected(residual, self.tolerance, self.stage)

    def carry(self, defect_end: np.ndarray) -> None:
        self.carried = self.carried + defect_end


class PairRunner:
    """Lockstep integration of a coupled pair on lifted coordinates."""

    def __init__(self, params: FlowParams, policy: StepPolicy, rng: RngStream,
                 observe_times: Sequence[float] = ()):
        self.params = params
        self.policy = policy
        self.rng = rng
        self.dt = resolve_dt(params, policy)
        self.t_max = resolve_t_max(params, policy)
        self.sigma = math.sqrt(params.kappa * self.dt)
        self.chunk = get_settings().chunk_steps
        self.pending_obs = sorted(observe_times)
        self.observations: Dict[str, List[Tuple[float, float]]] = {}

    def _observe(self, times: np.ndarray, path: np.ndarray, path_t: np.ndarray) -> None:
        while self.pending_obs and self.pending_obs[0] <= times[-1]:
            t_obs = self.pending_obs.pop(0)
            j = int(np.searchsorted(times, t_obs))
            self.observations[repr(t_obs)] = [
                tuple(float(v) for v in np.mod(path[j], 1.0)),
                tuple(float(v) for v in np.mod(path_t[j], 1.0)),
            ]

    def run(self, x: np.ndarray, xt: np.ndarray, t0: float, transform: NoiseTransform,
            detector: PairDetector, stage: str,
            relation: Optional[PairRelation] = None) -> Tuple[float, np.ndarray, np.ndarray, str]:
        """
        Integrate until ``detector`` fires.

        With a ``relation`` the partner is held on it and its defect is checked up to the event.

        Returns:
            (event time, X at the event, X~ at the event, detector payload)

        Raises:
            CapExceeded: The stage ran for T_max without its detector firing
            DesyncDetected: The partner defect exceeded the relation tolerance
        """
        p = self.params
        dt = self.dt
        anchored = relation is not None
        sign = relation.sign if anchored else np.ones(2)
        offset = relation.offset if anchored else np.zeros(2)
        cap_steps = int(math.ceil(self.t_max / dt * (1.0 - 1e-12)))
        first = detector(np.array([t0]), x[None, :], xt[None, :])
        if first is not None:
            self._observe(np.array([t0]), x[None, :], xt[None, :])
            return t0, x.copy(), xt.copy(), first[2]
        step = 0
        while step < cap_steps:
            steps = min(self.chunk, cap_steps - step)
            counter = self.rng.counter
            z = np.ascontiguousarray(self.rng.normals(steps))
            path, path_t, defect = pair_chunk(x, xt, z, dt, self.sigma, transform.matrix, transform.independent,
                                              anchored, sign, offset, p.epsilon, p.amplitude, p.cutoff_inner,
                                              p.cutoff_outer)
            times = t0 + (step + np.arange(steps + 1)) * dt
            hit = detector(times, path, path_t)
            if hit is not None:
                k, w, payload = hit
                k = max(int(k), 1)
                if anchored:
                    relation.check(defect[:k + 1])
                self.rng.rewind(counter + k)
                self._observe(times[:k + 1], path[:k + 1], path_t[:k + 1])
                t_event = times[k - 1] + w * dt
                x_event = path[k - 1] + w * (path[k] - path[k - 1])
                xt_event = path_t[k - 1] + w * (path_t[k] - path_t[k - 1])
                return float(t_event), x_event, xt_event, payload
            if anchored:
                relation.check(defect)
                relation.carry(defect[-1])
            self._observe(times, path, path_t)
            step += steps
            x, xt = path[-1].copy(), path_t[-1].copy()
        logger.warning(f"⚠️ {stage} reached its cap T_max={self.t_max:.4g}")
        raise CapExceeded(self.t_max, step * dt, what=stage)


def _to_torus(v: np.ndarray) -> np.ndarray:
    out = np.mod(v, 1.0)
    out[out >= 1.0] = 0.0
    return out


class _Stage1Detector:
    """Phase (a): both projections enter the same core component."""

    def __init__(self, regions: CellRegions):
        self.regions = regions

    def __call__(self, times, path, path_t) -> PairHit:
        hits = np.flatnonzero(self.regions.same_core(path, path_t))
        if hits.size == 0:
            return None
        return int(hits[0]), 1.0, "core"


class _ReflectionDetector:
    """Phase (b): the separation coordinate changes sign, or a partner leaves U."""

    def __init__(self, regions: CellRegions, normal: np.ndarray, quarter: int):
        self.regions = regions
        self.normal = normal
        self.quarter = quarter

    def __call__(self, times, path, path_t) -> PairHit:
        eps = self.regions.eps
        sep = _wrap(path - path_t, eps) @ self.normal
        if len(sep) == 1:
            return (0, 1.0, "met") if sep[0] <= 0 else None
        met = np.zeros(len(sep), dtype=bool)
        met[1:] = (sep[:-1] > 0) & (sep[1:] <= 0)
        left = ~(self.regions.in_u(path) & self.regions.in_u(path_t)
                 & (self.regions.quarter(path) == self.quarter)
                 & (self.regions.quarter(path_t) == self.quarter))
        left[0] = False
        met_idx = np.flatnonzero(met)
        left_idx = np.flatnonzero(left)
        k_met = int(met_idx[0]) if met_idx.size else None
        k_left = int(left_idx[0]) if left_idx.size else None
        if k_met is not None and (k_left is None or k_met <= k_left):
            a, b = sep[k_met - 1], sep[k_met]
            w = a / (a - b) if a != b else 1.0
            return k_met, float(w), "met"
        if k_left is not None:
            return k_left, 1.0, "left"
        return None


def stage1_couple_projections(x, xt, params: FlowParams, regions: CellRegions, policy: StepPolicy,
                              rng: RngStream, t0: float = 0.0, runner: Optional[PairRunner] = None,
                              outcome: Optional[CouplingOutcome] = None) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Couple the projections onto the eps-torus.

    Returns:
        (duration, X, X~) with Pi_eps X~ = Pi_eps X at the end

    Raises:
        CapExceeded: T_max elapsed in one phase
    """
    eps = params.epsilon
    runner = runner or PairRunner(params, policy, rng)
    x = np.asarray(x, dtype=float).copy()
    xt = np.asarray(xt, dtype=float).copy()
    t = t0
    while True:
        gap = _wrap(x - xt, eps)
        if np.all(gap == 0.0):
            return t - t0, x, _glue_projection(x, xt, eps)
        if not bool(regions.same_core(x[None, :], xt[None, :])[0]):
            if outcome is not None:
                outcome.stage1_attempts += 1
            t, x, xt, _ = runner.run(x, xt, t, NoiseTransform.independent_noise(), _Stage1Detector(regions), "stage1")
        if outcome is not None:
            outcome.reflection_attempts += 1
        d = _wrap(x - xt, eps)
        dist = float(np.linalg.norm(d))
        if dist < defaults.DEGENERATE_DISTANCE:
            return t - t0, x, _glue_projection(x, xt, eps)
        normal = d / dist
        transform = reflection_transform(x, xt, period=eps)
        quarter = int(regions.quarter(x[None, :])[0])
        t, x, xt, payload = runner.run(x, xt, t, transform, _ReflectionDetector(regions, normal, quarter), "stage1")
        if payload == "met":
            return t - t0, x, _glue_projection(x, xt, eps)


def _glue_projection(x: np.ndarray, xt: np.ndarray, eps: float) -> np.ndarray:
    """Move X~ within its own eps-cell so that Pi_eps X~ = Pi_eps X."""
    shift = eps * np.round((xt - x) / eps)
    return _to_torus(x + shift)


class _LineDetector:
    """First time coordinate ``axis`` of X reaches a lattice; monitors a partner relation."""

    def __init__(self, axis: int, spacing: float, offset: float, monitor: Callable[[np.ndarray, np.ndarray], float],
                 tolerance: float, stage: str):
        self.axis = axis
        self.spacing = spacing
        self.offset = offset
        self.monitor = monitor
        self.tolerance = tolerance
        self.stage = stage
        self.worst = 0.0

    def __call__(self, times, path, path_t) -> PairHit:
        hit = stopping.first_line_hit(times, path, self.spacing, self.axis, self.offset)
        upto = len(path) if hit is None else hit[0] + 1
        residual = self.monitor(path[:upto], path_t[:upto])
        self.worst = max(self.worst, residual)
        if residual > self.tolerance:
            raise DesyncDetected(residual, self.tolerance, self.stage)
        if hit is None:
            return None
        k, event = hit
        if k == 0:
            return 0, 1.0, "hit"
        t_prev = times[k - 1]
        w = (event.time - t_prev) / (times[k] - t_prev) if times[k] > t_prev else 1.0
        return k, float(w), "hit"


def _sync_residual(eps: float):
    def monitor(path, path_t) -> float:
        return float(np.max(np.abs(_wrap(path - path_t, eps))))
    return monitor


def _mirror_residual(eps: float, axis: int):
    i = axis - 1
    o = 1 - i

    def monitor(path, path_t) -> float:
        r_axis = np.abs(_wrap(path[:, i] + path_t[:, i], eps))
        r_other = np.abs(_wrap(path[:, o] - path_t[:, o], eps))
        return float(max(r_axis.max(), r_other.max()))
    return monitor


def stage2_sync_to_lattice(x, xt, axis: int, params: FlowParams, policy: StepPolicy, rng: RngStream,
                           t0: float = 0.0,
                           runner: Optional[PairRunner] = None) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Synchronous evolution until coordinate ``axis`` of X reaches the eps/2 lattice.

    Returns:
        (sigma, X, X~) with both axis coordinates on the lattice

    Raises:
        CapExceeded, DesyncDetected
    """
    eps = params.epsilon
    half = eps / 2.0
    runner = runner or PairRunner(params, policy, rng)
    x = np.asarray(x, dtype=float).copy()
    xt = np.asarray(xt, dtype=float).copy()
    tol = defaults.SYNC_TOLERANCE * eps
    stage = f"stage2 axis {axis}"
    detector = _LineDetector(axis, half, 0.0, _sync_residual(eps), tol, stage)
    relation = PairRelation.synchronous(x, xt, tol, stage)
    t, xe, xte, _ = runner.run(x, xt, t0, NoiseTransform.identity(), detector, stage, relation)
    i = axis - 1
    xe[i] = half * np.round(xe[i] / half)
    partner_line = half * np.round(xte[i] / half)
    if abs(xte[i] - partner_line) > tol:
        raise DesyncDetected(abs(xte[i] - partner_line), tol, f"stage2 axis {axis} partner hit")
    xte[i] = partner_line
    return t - t0, _to_torus(xe), _to_torus(xte)


def stage3_mirror_to_bisector(x, xt, axis: int, params: FlowParams, policy: StepPolicy, rng: RngStream,
                              t0: float = 0.0, runner: Optional[PairRunner] = None,
                              outcome: Optional[CouplingOutcome] = None) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Mirror-coupled evolution until X^axis reaches the bisector a + Z of the pair.

    Returns:
        (tau, X, X~) with the axis coordinates glued

    Raises:
        CapExceeded, DesyncDetected
    """
    eps = params.epsilon
    half = eps / 2.0
    x = _to_torus(np.asarray(x, dtype=float).copy())
    xt = _to_torus(np.asarray(xt, dtype=float).copy())
    i = axis - 1
    if x[i] == xt[i]:
        return 0.0, x, _glue_axis(x, xt, axis)
    runner = runner or PairRunner(params, policy, rng)
    bisector = half * np.round((x[i] + xt[i]) / eps)
    stage = f"stage3 axis {axis}"
    tol = defaults.MIRROR_TOLERANCE * eps
    detector = _LineDetector(axis, 1.0, float(bisector), _mirror_residual(eps, axis), tol, stage)
    relation = PairRelation.mirror(x, xt, axis, tol, stage)
    t, xe, xte, _ = runner.run(x, xt, t0, NoiseTransform.mirror(axis), detector, stage, relation)
    if outcome is not None:
        outcome.mirror_residual = max(outcome.mirror_residual, detector.worst, relation.worst)
    xe = _to_torus(xe)
    xte = _to_torus(xte)
    return t - t0, xe, _glue_axis(xe, xte, axis)


def _glue_axis(x: np.ndarray, xt: np.ndarray, axis: int) -> np.ndarray:
    out = xt.copy()
    out[axis - 1] = x[axis - 1]
    return out


def run_full_coupling(x, xt, params: FlowParams, policy: StepPolicy, rng: RngStream,
                      regions: Optional[CellRegions] = None,
                      observe_times: Sequence[float] = ()) -> CouplingOutcome:
    """
    Run all stages for one pair.

    Args:
        x, xt: Starting points on the unit torus
        params (FlowParams): Flow parameters
        policy (StepPolicy): Step policy and per-stage cap
        rng (RngStream): Pair stream, four normals per step
        regions (Optional[CellRegions]): Core regions (built with the default h0 when omitted)
        observe_times (Sequence[float]): Times at which both partners are recorded

    Returns:
        CouplingOutcome: Durations, tau_cpl and glue positions; failures keep the partial record
    """
    if rng.width != 4:
        rng = RngStream(rng.seed, rng.stream_index, width=4)
    regions = regions or CellRegions(params)
    x = _to_torus(np.asarray(x, dtype=float))
    xt = _to_torus(np.asarray(xt, dtype=float))
    outcome = CouplingOutcome()
    runner = PairRunner(params, policy, rng, observe_times)
    t = 0.0
    stage = "stage1"
    try:
        if np.array_equal(x, xt):
            for name in ("stage1", "stage2v", "stage3v", "stage2h", "stage3h"):
                outcome.stage_durations[name] = 0.0
                outcome.glue_positions[name] = [tuple(x), tuple(xt)]
        else:
            d, x, xt = stage1_couple_projections(x, xt, params, regions, policy, rng, t, runner, outcome)
            _record(outcome, "stage1", d, x, xt)
            t += d
            for axis, suffix in ((1, "v"), (2, "h")):
                stage = f"stage2{suffix}"
                d, x, xt = stage2_sync_to_lattice(x, xt, axis, params, policy, rng, t, runner)
                _record(outcome, stage, d, x, xt)
                t += d
                stage = f"stage3{suffix}"
                d, x, xt = stage3_mirror_to_bisector(x, xt, axis, params, policy, rng, t, runner, outcome)
                if axis == 2:
                    xt = x.copy()
                _record(outcome, stage, d, x, xt)
                t += d
        outcome.success = True
        outcome.tau_cpl = float(sum(outcome.stage_durations.values()))
    except CellmixError as e:
        outcome.success = False
        outcome.failure = f"{stage}: {e.detail}"
        logger.warning(f"⚠️ Pair {rng.stream_index} failed in {stage}: {e.detail}")
        outcome.observations = runner.observations
        return outcome

    if runner.pending_obs:
        _observe_after_coupling(outcome, runner, x, t, params, policy, rng)
    outcome.observations = runner.observations
    return outcome


def _record(outcome: CouplingOutcome, stage: str, duration: float, x: np.ndarray, xt: np.ndarray) -> None:
    outcome.stage_durations[stage] = float(duration)
    outcome.glue_positions[stage] = [tuple(float(v) for v in x), tuple(float(v) for v in xt)]


def _observe_after_coupling(outcome, runner: PairRunner, x, t, params, policy, rng) -> None:
    """After gluing both partners follow X; record the remaining observation times."""
    single = RngStream(rng.seed, rng.stream_index, width=4, counter=rng.counter)
    cap_policy = policy.copy(update={"t_max": max(runner.pending_obs) - t + runner.dt})
    traj, _ = simulate_until(x, TimeReached(max(runner.pending_obs)), params, cap_policy, single, t0=t)
    states = traj.torus_states()
    for t_obs in list(runner.pending_obs):
        j = min(int(np.searchsorted(traj.times, t_obs)), len(traj.times) - 1)
        pos = tuple(float(v) for v in states[j])
        runner.observations[repr(t_obs)] = [pos, pos]
    runner.pending_obs.clear()


def starting_pairs(n_samples: int, pair_distribution: str, params: FlowParams, seed: int) -> List[Pair]:
    """
    Starting pairs for coupling-time estimates.

    ``uniform``: independent uniform points. ``grid``: a 4x4 stratified grid of first
    points, cycling through antipodal, half-shifted and corner-adjacent partners.
    """
    if pair_distribution == "uniform":
        u = RngStream(seed, START_STREAM).uniforms(4 * n_samples).reshape(n_samples, 4)
        return [(u[i, :2].copy(), u[i, 2:].copy()) for i in range(n_samples)]
    if pair_distribution != "grid":
        raise CellmixValidationError(f"unknown pair distribution {pair_distribution}")
    eps = params.epsilon
    corner_offset = eps / 50.0
    pairs = []
    for idx in range(16):
        i, j = divmod(idx, 4)
        x = np.array([(i + 0.5) / 4.0, (j + 0.5) / 4.0])
        kind = (i + j) % 4
        if kind == 0:
            xt = x + np.array([0.5, 0.5])
        elif kind == 1:
            xt = x + np.array([0.5, 0.0])
        elif kind == 2:
            xt = x + np.array([0.0, 0.5])
        else:
            corner = (eps / 2.0) * np.round(x / (eps / 2.0))
            xt = corner + np.array([corner_offset, -corner_offset])
        pairs.append((x, _to_torus(xt)))
    return [pairs[s % 16] for s in range(n_samples)]


def _run_pair_task(args) -> CouplingOutcome:
    pair_id, x, xt, params, policy, seed = args
    return run_full_coupling(x, xt, params, policy, RngStream(seed, pair_id, width=4))


def run_pairs(
    pairs: Sequence[Pair], params: FlowParams, policy: StepPolicy, seed: int, jobs: int = 1
) -> List[CouplingOutcome]:
    """Independent coupled runs; pair i always uses stream i, so results do not depend on ``jobs``."""
    tasks = [(i, x, xt, params, policy, seed) for i, (x, xt) in enumerate(pairs)]
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_pair_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_pair_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def summarize_outcomes(
    outcomes: Sequence[CouplingOutcome], value: Callable[[CouplingOutcome], float] = None
) -> CouplingStats:
    """Mean, median, upper quartile and standard error over successful pairs."""
    value = value or (lambda o: o.tau_cpl)
    ok = [o for o in outcomes if o.success]
    vals = np.array([value(o) for o in ok], dtype=float)
    n = len(vals)
    stage_means = {}
    for name in ("stage1", "stage2v", "stage3v", "stage2h", "stage3h"):
        xs = [o.stage_durations[name] for o in ok if name in o.stage_durations]
        if xs:
            stage_means[name] = float(np.mean(xs))
    refl = sum(o.reflection_attempts for o in ok)
    return CouplingStats(
        n_samples=len(outcomes),
        n_success=n,
        failures=len(outcomes) - n,
        mean=float(vals.mean()) if n else float("nan"),
        median=float(np.median(vals)) if n else float("nan"),
        upper_quartile=float(np.quantile(vals, 0.75)) if n else float("nan"),
        se=float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan"),
        stage_means=stage_means,
        reflection_success_rate=(n / refl) if refl else None,
    )


def estimate_tau_cpl(params: FlowParams, n_samples: int, pair_distribution: str, policy: StepPolicy,
                     seed: int, jobs: int = 1) -> Tuple[CouplingStats, List[CouplingOutcome]]:
    """
    Coupling-time statistics over independent pairs.

    Args:
        params (FlowParams): Flow parameters
        n_samples (int): Number of pairs, at least 30
        pair_distribution (str): ``uniform`` or ``grid``
        policy (StepPolicy): Step policy
        seed (int): Master seed
        jobs (int): Worker processes

    Returns:
        Tuple[CouplingStats, List[CouplingOutcome]]: Statistics (failures counted, never dropped)
        and the per-pair records
    """
    if n_samples < 30:
        raise CellmixValidationError(f"estimate_tau_cpl needs at least 30 samples, got {n_samples}")
    logger.info(f"🔗 Estimating tau_cpl: eps={params.epsilon}, A={params.amplitude}, kappa={params.kappa}, "
                f"{n_samples} {pair_distribution} pairs")
    pairs = starting_pairs(n_samples, pair_distribution, params, seed)
    outcomes = run_pairs(pairs, params, policy, seed, jobs)
    stats = summarize_outcomes(outcomes)
    logger.info(f"✅ tau_cpl mean={stats.mean:.4g} (SE {stats.se:.2g}), failures={stats.failures}")
    return stats, outcomes


def marginal_tv_check(params: FlowParams, policy: StepPolicy, t: float, n_pairs: int, seed: int,
                      x=(0.1, 0.2), xt=(0.6, 0.7), bins: int = 16, jobs: int = 1) -> Dict[str, float]:
    """
    Binned L1 distance between the two partners' marginals at time t against 2 P(tau_cpl > t).

    Returns:
        dict with ``tv``, ``p_uncoupled``, ``binning_se`` and ``holds``
        (tv <= 2 P(tau_cpl > t) + 4 binning SE)
    """
    x = np.asarray(x, dtype=float)
    xt = np.asarray(xt, dtype=float)
    tasks = [(i, x, xt, params, policy, seed, t) for i in range(n_pairs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_observed_pair_task, tasks))
    else:
        outcomes = [_observed_pair_task(task) for task in tasks]
    key = repr(float(t))
    first, second, uncoupled = [], [], 0
    for o in outcomes:
        if key not in o.observations:
            uncoupled += 1
            continue
        a, b = o.observations[key]
        first.append(a)
        second.append(b)
        if not o.success or o.tau_cpl is None or o.tau_cpl > t:
            uncoupled += 1
    n = len(first)
    rng_edges = [[0.0, 1.0], [0.0, 1.0]]
    p, _, _ = np.histogram2d(*np.array(first).T, bins=bins, range=rng_edges) if n else (np.zeros((bins, bins)), 0, 0)
    q, _, _ = np.histogram2d(*np.array(second).T, bins=bins, range=rng_edges) if n else (np.zeros((bins, bins)), 0, 0)
    p = p / max(n, 1)
    q = q / max(n, 1)
    tv = float(np.abs(p - q).sum())
    se = float(np.sqrt((p * (1 - p) + q * (1 - q)) / max(n, 1)).sum())
    p_unc = uncoupled / max(len(outcomes), 1)
    return {
        "tv": tv,
        "p_uncoupled": p_unc,
        "binning_se": se,
        "holds": float(tv <= 2.0 * p_unc + 4.0 * se),
    }


def _observed_pair_task(args) -> CouplingOutcome:
    pair_id, x, xt, params, policy, seed, t = args
    return run_full_coupling(x, xt, params, policy, RngStream(seed, pair_id, width=4), observe_times=[float(t)])
