"""
Cellular Flow Field

Exact evaluation of the stream function H(x) = sin(2 pi x1/eps) sin(2 pi x2/eps), the
stream-value cutoff zeta(h), and the velocity u = A g(H) grad_perp H with
g(h) = zeta(h) + h zeta'(h). The numba kernels here are shared by the SDE integrators.
"""

import logging
import math
from functools import lru_cache
from typing import Dict, Tuple, Union

import numpy as np
import pandas as pd
from numba import njit
from scipy import fft as sp_fft

from cellmix.config import defaults
from cellmix.exceptions import CellmixValidationError
from cellmix.models.params import FlowParams, cells_per_side
from cellmix.models.results import FieldDiagnostics

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

TWO_PI = 2.0 * math.pi


@njit(cache=True)
def _smoothstep(t):
    if t <= 0.0:
        return 0.0
    if t >= 1.0:
        return 1.0
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


@njit(cache=True)
def _smoothstep_prime(t):
    if t <= 0.0 or t >= 1.0:
        return 0.0
    return 30.0 * t * t * (t - 1.0) * (t - 1.0)


@njit(cache=True)
def cutoff_pair(h, inner, outer):
    """zeta(h) and zeta'(h) for the quintic profile."""
    width = outer - inner
    t = (outer - abs(h)) / width
    sign = 1.0 if h >= 0.0 else -1.0
    return _smoothstep(t), -_smoothstep_prime(t) * sign / width


@njit(cache=True)
def velocity_point(x1, x2, eps, amp, inner, outer):
    """Velocity at one point; coordinates may be lifted, they are reduced mod eps."""
    if amp == 0.0:
        return 0.0, 0.0
    k = 2.0 * np.pi / eps
    y1 = x1 % eps
    y2 = x2 % eps
    s1 = math.sin(k * y1)
    c1 = math.cos(k * y1)
    s2 = math.sin(k * y2)
    c2 = math.cos(k * y2)
    h = s1 * s2
    if abs(h) >= outer:
        return 0.0, 0.0
    z, dz = cutoff_pair(h, inner, outer)
    g = z + h * dz
    return -amp * g * k * s1 * c2, amp * g * k * c1 * s2


@njit(cache=True)
def _smoothstep_second(t):
    if t <= 0.0 or t >= 1.0:
        return 0.0
    return 60.0 * t * (t - 1.0) * (2.0 * t - 1.0)


@njit(cache=True)
def velocity_gradient_point(x1, x2, eps, amp, inner, outer):
    """Analytic Jacobian (du1/dx1, du1/dx2, du2/dx1, du2/dx2) of the velocity at one point."""
    if amp == 0.0:
        return 0.0, 0.0, 0.0, 0.0
    k = 2.0 * np.pi / eps
    y1 = x1 % eps
    y2 = x2 % eps
    s1 = math.sin(k * y1)
    c1 = math.cos(k * y1)
    s2 = math.sin(k * y2)
    c2 = math.cos(k * y2)
    h = s1 * s2
    if abs(h) >= outer:
        return 0.0, 0.0, 0.0, 0.0
    width = outer - inner
    t = (outer - abs(h)) / width
    z, dz = cutoff_pair(h, inner, outer)
    g = z + h * dz
    dg = 2.0 * dz + h * _smoothstep_second(t) / (width * width)
    scale = amp * k * k
    # dH/dx1 = k c1 s2, dH/dx2 = k s1 c2
    j11 = -scale * (dg * c1 * s2 * s1 * c2 + g * c1 * c2)
    j12 = -scale * (dg * s1 * c2 * s1 * c2 - g * s1 * s2)
    j21 = scale * (dg * c1 * s2 * c1 * s2 - g * s1 * s2)
    j22 = scale * (dg * s1 * c2 * c1 * s2 + g * c1 * c2)
    return j11, j12, j21, j22


@njit(cache=True)
def _gradient_many(x1s, x2s, eps, amp, inner, outer):
    n = x1s.shape[0]
    out = np.empty((n, 4))
    for i in range(n):
        j11, j12, j21, j22 = velocity_gradient_point(x1s[i], x2s[i], eps, amp, inner, outer)
        out[i, 0] = j11
        out[i, 1] = j12
        out[i, 2] = j21
        out[i, 3] = j22
    return out


@njit(cache=True)
def _velocity_many(x1s, x2s, eps, amp, inner, outer):
    n = x1s.shape[0]
    out = np.empty((n, 2))
    for i in range(n):
        u1, u2 = velocity_point(x1s[i], x2s[i], eps, amp, inner, outer)
        out[i, 0] = u1
        out[i, 1] = u2
    return out


class CutoffProfile:
    """
    Even, C^2 cutoff of the stream value.

    zeta(h) = S((outer - |h|)/(outer - inner)) clamped to [0, 1], S the quintic smoothstep;
    equal to 1 for |h| <= inner and 0 for |h| >= outer.
    """

    def __init__(self, inner: float = 0.25, outer: float = 0.5):
        if not 0 < inner < outer <= 1:
            raise CellmixValidationError(
                f"cutoff levels must satisfy 0 < inner < outer <= 1, got {inner}, {outer}"
            )
        self.inner = inner
        self.outer = outer

    @classmethod
    def from_params(cls, params: FlowParams) -> "CutoffProfile":
        return cls(params.cutoff_inner, params.cutoff_outer)

    @property
    def width(self) -> float:
        return self.outer - self.inner

    def _t(self, h: ArrayLike) -> np.ndarray:
        return np.clip((self.outer - np.abs(h)) / self.width, 0.0, 1.0)

    def value(self, h: ArrayLike) -> ArrayLike:
        t = self._t(h)
        out = t * t * t * (t * (6.0 * t - 15.0) + 10.0)
        return out if np.ndim(h) else float(out)

    def derivative(self, h: ArrayLike) -> ArrayLike:
        t = self._t(h)
        out = -30.0 * t * t * (t - 1.0) ** 2 * np.sign(h) / self.width
        return out if np.ndim(h) else float(out)

    def second_derivative(self, h: ArrayLike) -> ArrayLike:
        t = self._t(h)
        inside = (np.abs(h) > self.inner) & (np.abs(h) < self.outer)
        out = np.where(inside, 60.0 * t * (t - 1.0) * (2.0 * t - 1.0) / self.width ** 2, 0.0)
        return out if np.ndim(h) else float(out)

    def g(self, h: ArrayLike) -> ArrayLike:
        """Chain-rule factor g(h) = zeta(h) + h zeta'(h)."""
        if np.ndim(h):
            h = np.asarray(h, dtype=float)
        return self.value(h) + h * self.derivative(h)

    def g_prime(self, h: ArrayLike) -> ArrayLike:
        if np.ndim(h):
            h = np.asarray(h, dtype=float)
        return 2.0 * self.derivative(h) + h * self.second_derivative(h)

    def g_max(self) -> float:
        return _g_max(self.inner, self.outer)

    def g_prime_max(self) -> float:
        return _g_prime_max(self.inner, self.outer)


@lru_cache(maxsize=32)
def _g_max(inner: float, outer: float) -> float:
    h = np.linspace(0.0, outer, 200_001)
    return float(np.max(np.abs(CutoffProfile(inner, outer).g(h))))


@lru_cache(maxsize=32)
def _g_prime_max(inner: float, outer: float) -> float:
    h = np.linspace(0.0, outer, 200_001)
    return float(np.max(np.abs(CutoffProfile(inner, outer).g_prime(h))))


def cutoff(h: ArrayLike, profile: CutoffProfile) -> ArrayLike:
    """Evaluate zeta(h) for a profile."""
    return profile.value(h)


def stream_value(x, params: FlowParams) -> ArrayLike:
    """
    H(x) = sin(2 pi x1/eps) sin(2 pi x2/eps).

    Args:
        x: A point (x1, x2) or an array of shape (..., 2)
        params (FlowParams): Flow parameters

    Returns:
        H at each point, in [-1, 1]
    """
    arr = np.asarray(x, dtype=float)
    k = params.wavenumber
    eps = params.epsilon
    h = np.sin(k * np.mod(arr[..., 0], eps)) * np.sin(k * np.mod(arr[..., 1], eps))
    return float(h) if h.ndim == 0 else h


def velocity(x, params: FlowParams) -> np.ndarray:
    """
    u(x) = A g(H(x)) grad_perp H(x), with grad_perp = (-d2, d1).

    Args:
        x: A point (x1, x2) or an array of shape (..., 2)
        params (FlowParams): Flow parameters

    Returns:
        np.ndarray: Velocity with the same leading shape as ``x``
    """
    arr = np.asarray(x, dtype=float)
    flat = arr.reshape(-1, 2)
    out = _velocity_many(
        np.ascontiguousarray(flat[:, 0]),
        np.ascontiguousarray(flat[:, 1]),
        params.epsilon,
        params.amplitude,
        params.cutoff_inner,
        params.cutoff_outer,
    )
    return out.reshape(arr.shape)


def speed_bound(params: FlowParams) -> float:
    """Upper bound A (2 pi/eps) max|g| on the speed."""
    return params.amplitude * params.wavenumber * CutoffProfile.from_params(params).g_max()


def gradient_bound(params: FlowParams) -> float:
    """Upper bound A (2 pi/eps)^2 (max|g| + max|g'|) on every entry of the velocity Jacobian."""
    profile = CutoffProfile.from_params(params)
    return params.amplitude * params.wavenumber ** 2 * (profile.g_max() + profile.g_prime_max())


def velocity_gradient(x, params: FlowParams) -> np.ndarray:
    """
    Analytic Jacobian of the velocity.

    Args:
        x: A point (x1, x2) or an array of shape (..., 2)
        params (FlowParams): Flow parameters

    Returns:
        np.ndarray: Shape (..., 2, 2) with [..., i, j] = du_i/dx_j
    """
    arr = np.asarray(x, dtype=float)
    flat = arr.reshape(-1, 2)
    out = _gradient_many(
        np.ascontiguousarray(flat[:, 0]),
        np.ascontiguousarray(flat[:, 1]),
        params.epsilon,
        params.amplitude,
        params.cutoff_inner,
        params.cutoff_outer,
    )
    return out.reshape(arr.shape[:-1] + (2, 2))


def _difference_gradient(pts: np.ndarray, params: FlowParams) -> np.ndarray:
    step = defaults.GRADIENT_STEP * params.epsilon
    columns = []
    for axis in range(2):
        shift = np.zeros(2)
        shift[axis] = step
        columns.append((velocity(pts + shift, params) - velocity(pts - shift, params)) / (2.0 * step))
    return np.stack(columns, axis=-1)


def velocity_on_grid(params: FlowParams, n: int, period: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Velocity components on the n x n grid x = period * (i1, i2)/n, indexed [i1, i2]."""
    coords = period * np.arange(n) / n
    x1, x2 = np.meshgrid(coords, coords, indexing="ij")
    u = velocity(np.stack([x1, x2], axis=-1), params)
    return u[..., 0], u[..., 1]


def _wavenumbers(n: int, period: float = 1.0) -> np.ndarray:
    k = TWO_PI / period * sp_fft.fftfreq(n, d=1.0 / n)
    if n % 2 == 0:
        k[n // 2] = 0.0
    return k


SYMMETRIES = (
    "reflect_x1_v1",
    "reflect_x1_v2",
    "reflect_x2_v1",
    "reflect_x2_v2",
    "shift_x1",
    "shift_x2",
)


def _symmetry_residuals(params: FlowParams, x1: np.ndarray, x2: np.ndarray, u: np.ndarray) -> Dict[str, float]:
    half = params.epsilon / 2.0
    ref1 = velocity(np.stack([-x1, x2], axis=-1), params)
    ref2 = velocity(np.stack([x1, -x2], axis=-1), params)
    sh1 = velocity(np.stack([x1 + half, x2], axis=-1), params)
    sh2 = velocity(np.stack([x1, x2 + half], axis=-1), params)
    return {
        "reflect_x1_v1": float(np.max(np.abs(ref1[..., 0] + u[..., 0]))),
        "reflect_x1_v2": float(np.max(np.abs(ref1[..., 1] - u[..., 1]))),
        "reflect_x2_v1": float(np.max(np.abs(ref2[..., 0] - u[..., 0]))),
        "reflect_x2_v2": float(np.max(np.abs(ref2[..., 1] + u[..., 1]))),
        "shift_x1": float(np.max(np.abs(sh1 + u))),
        "shift_x2": float(np.max(np.abs(sh2 + u))),
    }


def field_diagnostics(params: FlowParams, grid_n: int) -> FieldDiagnostics:
    """
    Divergence, symmetry and speed checks of the velocity on a grid_n^2 grid.

    The divergence is the trace of the analytic velocity Jacobian. The Jacobian itself
    is checked against central differences of the sampled velocity; ``gradient_residual``
    is the largest mismatch relative to the largest Jacobian entry.
    """
    if grid_n < 16 or grid_n & (grid_n - 1):
        raise CellmixValidationError(f"grid_n must be a power of two >= 16, got {grid_n}")

    coords = np.arange(grid_n) / grid_n
    x1, x2 = np.meshgrid(coords, coords, indexing="ij")
    pts = np.stack([x1, x2], axis=-1)
    u = velocity(pts, params)

    if params.amplitude == 0:
        return FieldDiagnostics(
            grid_n=grid_n,
            div_residual=0.0,
            gradient_residual=0.0,
            symmetry_residuals={name: 0.0 for name in SYMMETRIES},
            max_speed=0.0,
            speed_bound=0.0,
        )

    jac = velocity_gradient(pts, params)
    divergence = jac[..., 0, 0] + jac[..., 1, 1]
    scale = float(np.max(np.abs(jac)))
    mismatch = np.max(np.abs(_difference_gradient(pts, params) - jac))

    diagnostics = FieldDiagnostics(
        grid_n=grid_n,
        div_residual=float(np.max(np.abs(divergence))),
        gradient_residual=float(mismatch / scale) if scale > 0 else float(mismatch),
        symmetry_residuals=_symmetry_residuals(params, x1, x2, u),
        max_speed=float(np.max(np.hypot(u[..., 0], u[..., 1]))),
        speed_bound=speed_bound(params),
    )
    logger.debug(f"Field diagnostics for eps={params.epsilon}, A={params.amplitude}: {diagnostics}")
    return diagnostics


def stream_grid(params: FlowParams, n: int) -> pd.DataFrame:
    """Table x1, x2, H, xi, u1, u2 on an n x n grid of the unit torus."""
    coords = np.arange(n) / n
    x1, x2 = np.meshgrid(coords, coords, indexing="ij")
    pts = np.stack([x1, x2], axis=-1)
    h = stream_value(pts, params)
    u = velocity(pts, params)
    return pd.DataFrame(
        {
            "x1": x1.ravel(),
            "x2": x2.ravel(),
            "H": h.ravel(),
            "xi": CutoffProfile.from_params(params).value(h).ravel(),
            "u1": u[..., 0].ravel(),
            "u2": u[..., 1].ravel(),
        }
    )


def optimal_cell_size(kappa: float, amplitude: float) -> float:
    """Cell size (kappa/A)^(1/4) at which eps^2/kappa equals 1/sqrt(kappa A)."""
    if kappa <= 0 or amplitude <= 0:
        raise CellmixValidationError("kappa and amplitude must be positive")
    return (kappa / amplitude) ** 0.25


def nearest_admissible_eps(eps: float) -> float:
    """Round a cell size to the nearest 1/m with m a positive integer."""
    m = max(1, int(round(1.0 / eps)))
    eps_adm = 1.0 / m
    cells_per_side(eps_adm)
    return eps_adm
