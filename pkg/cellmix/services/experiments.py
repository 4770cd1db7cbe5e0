"""
Experiments

Regime classification and predicted bounds, parameter sweeps over the estimators,
lifted-walk moment reports, crossing-rate diagnostics and power-law fits.
"""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from cellmix.config import defaults
from cellmix.exceptions import CapExceeded, CellmixError, CellmixValidationError, OutOfTheory, TooFewPoints
from cellmix.models.params import FlowParams, RegimeThresholds, SolverConfig, StepPolicy, SweepSpec
from cellmix.models.results import BoundPrediction, FitResult, MomentReport, RegimeLabel
from cellmix.services import coupling, spectral, stopping
from cellmix.services.rng import RngStream
from cellmix.services.sde import brownian_increments, coarsen_increments, integrate_increments, simulate_until

logger = logging.getLogger(__name__)

# Stream for starting points of single-trajectory samples
START_STREAM = 2 ** 62 + 1

SWEEP_COLUMNS = [
    "epsilon", "amplitude", "kappa", "regime", "estimator",
    "value", "se", "n_samples", "failures", "error",
]


def _map(fn: Callable, tasks: Sequence, jobs: int) -> List:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def classify_regime(params: FlowParams, thresholds: Optional[RegimeThresholds] = None) -> RegimeLabel:
    """
    Label a parameter point with its branch of the three-regime bound.

    Checked in order: out-of-theory when A < factor kappa/eps^2 (or, with
    ``enforce_cell_scale``, eps^2/kappa above the limit), III when A <= kappa/eps^4,
    II when A <= kappa |ln delta|^2/eps^4, I otherwise.
    """
    thresholds = thresholds or RegimeThresholds()
    eps, amp, kappa = params.epsilon, params.amplitude, params.kappa
    cell_time = eps ** 2 / kappa
    margins: Dict[str, float] = {
        "A_eps2_over_kappa": amp * eps ** 2 / kappa,
        "A_eps4_over_kappa": amp * eps ** 4 / kappa,
        "eps2_over_kappa": cell_time,
    }
    if amp <= 0:
        return RegimeLabel(label="out-of-theory", margins=margins)
    log_delta = abs(math.log(params.delta))
    margins["A_eps4_over_kappa_log2"] = amp * eps ** 4 / (kappa * log_delta ** 2) if log_delta > 0 else math.inf

    if amp < thresholds.separation_factor * kappa / eps ** 2:
        label = "out-of-theory"
    elif thresholds.enforce_cell_scale and cell_time >= thresholds.cell_scale_limit:
        label = "out-of-theory"
    elif amp <= kappa / eps ** 4:
        label = "III"
    elif amp <= kappa * log_delta ** 2 / eps ** 4:
        label = "II"
    else:
        label = "I"
    return RegimeLabel(label=label, margins=margins)


def predicted_bound(params: FlowParams, thresholds: Optional[RegimeThresholds] = None) -> BoundPrediction:
    """
    Branch value of the three-regime bound, up to its constant.

    I: eps^2/kappa, II: eps^2/kappa + |ln delta|^2/(eps^2 A), III: 1/sqrt(kappa A).
    The averaging form eps^2/kappa + |ln delta|^2/(eps^2 A) is returned for every
    regime, and a variant with |ln delta| multiplied by the cell count 1/eps.

    Raises:
        OutOfTheory: The point is not in regime I, II or III
    """
    regime = classify_regime(params, thresholds)
    if not regime.in_theory():
        raise OutOfTheory(regime.label)
    eps, amp, kappa = params.epsilon, params.amplitude, params.kappa
    log_delta = abs(math.log(params.delta))
    cell_time = eps ** 2 / kappa
    averaging = cell_time + log_delta ** 2 / (eps ** 2 * amp)
    cell_scaled = cell_time + (log_delta / eps) ** 2 / (eps ** 2 * amp)
    if regime.label == "I":
        value = cell_time
    elif regime.label == "II":
        value = averaging
    else:
        value = 1.0 / math.sqrt(kappa * amp)
    return BoundPrediction(label=regime.label, value=value, averaging=averaging, cell_scaled=cell_scaled)


def fit_power_law(x: Sequence[float], y: Sequence[float]) -> FitResult:
    """
    Least-squares line through (ln x, ln y).

    Raises:
        TooFewPoints: fewer than three points
        CellmixValidationError: x not strictly increasing or y not positive
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 3:
        raise TooFewPoints(len(x))
    if len(x) != len(y):
        raise CellmixValidationError("x and y must have the same length")
    if np.any(np.diff(x) <= 0) or np.any(x <= 0):
        raise CellmixValidationError("x must be positive and strictly increasing")
    if np.any(y <= 0):
        raise CellmixValidationError("y must be positive")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    residuals = ly - (slope * lx + intercept)
    ss_res = float(residuals @ residuals)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return FitResult(
        slope=float(slope),
        intercept=float(intercept),
        r2=r2,
        residual_band=float(np.max(np.abs(residuals))),
        n_points=len(x),
    )


def _mean_se(values: Sequence[float]) -> Tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(v.mean()), se


def _separatrix_start(seed: int, index: int) -> np.ndarray:
    """Start on the vertical separatrix x1 = 0 at a uniform height."""
    u = RngStream(seed, START_STREAM).uniforms(index + 1)[index]
    return np.array([0.0, float(u)])


def _axis_return_sample(args) -> Optional[List[Tuple[float, float]]]:
    """(time, lifted x1) at tau^1_1..tau^1_nmax for one lifted trajectory, or None when capped."""
    i, params, policy, seed, nmax = args
    builder = stopping.ClockBuilder(params, diagonals=False)
    stop = stopping.ClockStop(builder, lambda b: b.axis_count(1) >= nmax)
    _, record = simulate_until(_separatrix_start(seed, i), stop, params, policy, RngStream(seed, i),
                               period=None, record=False, raise_on_cap=False)
    events = builder.clock.tau_axis[1]
    if record.capped or len(events) < nmax:
        return None
    return [(e.time, e.location[0]) for e in events[:nmax]]


def moment_report(params: FlowParams, n_list: Sequence[int], samples: int, seed: int,
                  policy: Optional[StepPolicy] = None, jobs: int = 1,
                  thresholds: Optional[RegimeThresholds] = None) -> MomentReport:
    """
    Moments of S_n, the lifted first coordinate at the n-th vertical separatrix return.

    Trajectories start on the vertical separatrix x1 = 0, so S_0 = 0 and xi_m = S_{m+1} - S_m.

    Args:
        params (FlowParams): Regime I or II parameters
        n_list (Sequence[int]): Return counts n
        samples (int): Trajectories, at least 100
        seed (int): Master seed
        policy (Optional[StepPolicy]): Step policy
        jobs (int): Worker processes

    Returns:
        MomentReport: Estimates with standard errors; capped samples are counted as failures
    """
    if samples < 100:
        raise CellmixValidationError(f"moment_report needs at least 100 samples, got {samples}")
    label = classify_regime(params, thresholds).label
    if label not in ("I", "II"):
        raise CellmixValidationError(f"moment_report applies to regimes I and II, got {label}")
    n_values = sorted(set(int(n) for n in n_list))
    if not n_values or n_values[0] < 1:
        raise CellmixValidationError("n values must be positive")
    nmax = n_values[-1]
    policy = policy or StepPolicy()
    logger.info(f"📈 Moment report: eps={params.epsilon}, A={params.amplitude}, n={n_values}, {samples} samples")
    results = _map(_axis_return_sample, [(i, params, policy, seed, nmax) for i in range(samples)], jobs)
    ok = [np.array([loc for _, loc in r]) for r in results if r is not None]
    failures = samples - len(ok)
    if failures:
        logger.warning(f"⚠️ {failures} moment samples hit the time cap")
    if not ok:
        raise CellmixError("every moment sample hit the time cap")
    s = np.stack(ok)
    xi = np.diff(np.concatenate([np.zeros((len(ok), 1)), s], axis=1), axis=1)

    def moments(values: np.ndarray, power: int):
        return _mean_se(values ** power)

    mean_s = [_mean_se(s[:, n - 1]) for n in n_values]
    s2 = [moments(s[:, n - 1], 2) for n in n_values]
    s4 = [moments(s[:, n - 1], 4) for n in n_values]
    xi2 = [moments(xi[:, m], 2) for m in range(nmax)]
    xi4 = [moments(xi[:, m], 4) for m in range(nmax)]
    report = MomentReport(
        epsilon=params.epsilon,
        n_values=n_values,
        samples=samples,
        failures=failures,
        mean_s=[m for m, _ in mean_s],
        mean_s_se=[e for _, e in mean_s],
        s2=[m for m, _ in s2],
        s2_se=[e for _, e in s2],
        s4=[m for m, _ in s4],
        s4_se=[e for _, e in s4],
        xi2=[m for m, _ in xi2],
        xi2_se=[e for _, e in xi2],
        xi4=[m for m, _ in xi4],
        xi4_se=[e for _, e in xi4],
    )
    logger.info("✅ Moment report done")
    return report


def crossing_lower_bound(report: MomentReport, level: Optional[float] = None) -> pd.DataFrame:
    """
    Second-moment lower bound P(|S_n| >= level) >= (E S_n^2 - level^2)^2 / E S_n^4.

    ``level`` defaults to one cell, eps.
    """
    level = report.epsilon if level is None else level
    rows = []
    for n, s2, s4 in zip(report.n_values, report.s2, report.s4):
        gap = max(s2 - level ** 2, 0.0)
        rows.append({"n": n, "level": level, "bound": gap ** 2 / s4 if s4 > 0 else 0.0})
    return pd.DataFrame(rows, columns=["n", "level", "bound"])


def _diagonal_return_sample(args) -> Optional[List[float]]:
    """tau-check_n - tau0 for n = 1..nmax from a uniform start, or None when capped."""
    i, params, policy, seed, nmax = args
    x0 = RngStream(seed, START_STREAM).uniforms(2 * (i + 1))[2 * i:2 * i + 2]
    builder = stopping.ClockBuilder(params, diagonals=True)
    stop = stopping.ClockStop(builder, lambda b: len(b.clock.tau_check_seq) >= nmax)
    _, record = simulate_until(x0, stop, params, policy, RngStream(seed, i), period=None,
                               record=False, raise_on_cap=False)
    clock = builder.clock
    if record.capped or clock.tau0 is None or len(clock.tau_check_seq) < nmax:
        return None
    return [e.time - clock.tau0.time for e in clock.tau_check_seq[:nmax]]


def estimate_tau_check(params: FlowParams, samples: int, seed: int, policy: Optional[StepPolicy] = None,
                       n_values: Sequence[int] = (1,), jobs: int = 1) -> pd.DataFrame:
    """Mean diagonal-return time tau-check_n (measured from tau0) with SE, per n."""
    n_values = sorted(set(int(n) for n in n_values))
    policy = policy or StepPolicy()
    results = _map(_diagonal_return_sample, [(i, params, policy, seed, n_values[-1]) for i in range(samples)], jobs)
    ok = [r for r in results if r is not None]
    rows = []
    for n in n_values:
        mean, se = _mean_se([r[n - 1] for r in ok])
        rows.append({"n": n, "statistic": "mean", "t": float("nan"), "value": mean, "se": se,
                     "samples": len(ok), "failures": samples - len(ok)})
    return pd.DataFrame(rows)


def crossing_rate_report(params: FlowParams, n_values: Sequence[int], t_grid: Sequence[float], samples: int,
                         seed: int, policy: Optional[StepPolicy] = None, jobs: int = 1,
                         thresholds: Optional[RegimeThresholds] = None) -> pd.DataFrame:
    """
    Empirical crossing statistics of the separatrix clocks.

    Regimes I and II: P(tau^1_n <= t) over ``t_grid`` and the median of tau^1_n, per n.
    Regime III: mean tau-check_n with SE, per n.

    Returns:
        DataFrame with columns n, statistic (cdf, median or mean), t, value, se, samples, failures
    """
    if samples < 100:
        raise CellmixValidationError(f"crossing_rate_report needs at least 100 samples, got {samples}")
    label = classify_regime(params, thresholds).label
    policy = policy or StepPolicy()
    n_values = sorted(set(int(n) for n in n_values))
    if label == "III":
        return estimate_tau_check(params, samples, seed, policy, n_values, jobs)
    if label not in ("I", "II"):
        raise OutOfTheory(label)
    results = _map(_axis_return_sample, [(i, params, policy, seed, n_values[-1]) for i in range(samples)], jobs)
    ok = [r for r in results if r is not None]
    failures = samples - len(ok)
    rows = []
    for n in n_values:
        times = np.array([r[n - 1][0] for r in ok])
        for t in t_grid:
            rows.append({"n": n, "statistic": "cdf", "t": float(t),
                         "value": float(np.mean(times <= t)) if len(times) else float("nan"),
                         "se": float("nan"), "samples": len(ok), "failures": failures})
        rows.append({"n": n, "statistic": "median", "t": float("nan"),
                     "value": float(np.median(times)) if len(times) else float("nan"),
                     "se": float("nan"), "samples": len(ok), "failures": failures})
    return pd.DataFrame(rows)


def reflected_crossing_times(n: int, eps: float, delta: float, kappa: float, samples: int, seed: int,
                             dt: Optional[float] = None) -> np.ndarray:
    """
    Times of n band crossings of a doubly reflected Brownian motion on [0, eps].

    The motion dW = sqrt(kappa) dB starts at 0; one crossing is an exit past eps*delta
    followed by a return to 0.

    Returns:
        np.ndarray: The n-th crossing time per sample
    """
    band = eps * delta
    if not 0 < band < eps:
        raise CellmixValidationError("delta must lie in (0, 1)")
    dt = dt or band ** 2 / (100.0 * kappa)
    sigma = math.sqrt(kappa * dt)
    rng = RngStream(seed, 0, width=samples)
    x = np.zeros(samples)
    outside = np.zeros(samples, dtype=bool)
    count = np.zeros(samples, dtype=int)
    done = np.full(samples, np.nan)
    t_cap = 1e3 * (n * band) ** 2 / kappa + 1e3 * eps ** 2 / kappa
    t = 0.0
    while np.any(np.isnan(done)):
        z = rng.normals(4096)
        for row in z:
            x = x + sigma * row
            returned = x <= 0.0
            x = np.abs(x)
            x = np.where(x > eps, 2 * eps - x, x)
            t += dt
            count += (outside & returned).astype(int)
            outside = np.where(returned, False, outside | (x >= band))
            newly = np.isnan(done) & (count >= n)
            done[newly] = t
        if t > t_cap:
            raise CapExceeded(t_cap, t, what="reflected crossings")
    return done


def _sample_tau_cpl(params, samples, pairs, policy, seed, jobs, value: str):
    stats, outcomes = coupling.estimate_tau_cpl(params, samples, pairs, policy, seed, jobs)
    if value == "tau_cpl":
        return stats.mean, stats.se, stats.n_samples, stats.failures
    if value == "stage12":
        fn = lambda o: o.stage_durations["stage1"] + o.stage_durations["stage2v"]  # noqa: E731
    else:
        fn = lambda o: o.stage_durations["stage3v"]  # noqa: E731
    picked = coupling.summarize_outcomes(outcomes, fn)
    return picked.mean, picked.se, picked.n_samples, picked.failures


def estimate_point(params: FlowParams, spec: SweepSpec, jobs: int = 1) -> Dict[str, Any]:
    """Evaluate one estimator at one parameter point; returns value, se, n_samples, failures."""
    policy = StepPolicy(dt=spec.dt, safety=spec.safety)
    est = spec.estimator
    if est in ("tau_cpl", "stage12", "stage3v"):
        value, se, n, failures = _sample_tau_cpl(params, spec.samples, spec.pairs, policy, spec.seed, jobs, est)
    elif est == "tau_check":
        table = estimate_tau_check(params, spec.samples, spec.seed, policy, (1,), jobs)
        row = table.iloc[0]
        value, se, n, failures = float(row["value"]), float(row["se"]), spec.samples, int(row["failures"])
    else:
        solver = SolverConfig(n=spec.n, resolution_guard=spec.resolution_guard, seed=spec.seed)
        if est == "t_diss":
            value = spectral.dissipation_time(params, solver)
        elif est == "t_mix":
            value = spectral.mixing_time_tv(params, solver)
        else:
            value = float(spectral.effective_diffusivity(params, solver)[0, 0])
        se, n, failures = float("nan"), 1, 0
    return {"value": value, "se": se, "n_samples": n, "failures": failures}


def _sweep_task(args) -> Dict[str, Any]:
    params, spec, thresholds, jobs, timings = args
    label = classify_regime(params, thresholds).label
    row: Dict[str, Any] = {
        "epsilon": params.epsilon,
        "amplitude": params.amplitude,
        "kappa": params.kappa,
        "regime": label,
        "estimator": spec.estimator,
        "value": float("nan"),
        "se": float("nan"),
        "n_samples": 0,
        "failures": 0,
        "error": "",
    }
    point = f"eps={params.epsilon}, A={params.amplitude}, kappa={params.kappa}"
    start = time.perf_counter()
    try:
        if label == "out-of-theory" and not spec.allow_out_of_theory:
            raise OutOfTheory(label)
        row.update(estimate_point(params, spec, jobs))
    except CellmixError as e:
        logger.warning(f"⚠️ Sweep point {point} failed: {e.detail}")
        row["error"] = e.detail
    except ValueError as e:
        logger.warning(f"⚠️ Sweep point {point} invalid: {e}")
        row["error"] = str(e)
    if timings:
        row["wall_time"] = time.perf_counter() - start
    return row


def run_sweep(spec: SweepSpec, jobs: int = 1, thresholds: Optional[RegimeThresholds] = None,
              timings: bool = False) -> pd.DataFrame:
    """
    Run one estimator over the (eps, A, kappa) grid of a sweep spec.

    Points run in parallel when there are several; a single point hands the workers to its
    estimator. Failures are recorded in the row and the sweep continues. Rows are sorted
    by (epsilon, amplitude, kappa).

    Returns:
        pd.DataFrame: One row per grid point; ``wall_time`` only with ``timings``
    """
    points = spec.points()
    columns = SWEEP_COLUMNS + (["wall_time"] if timings else [])
    if not points:
        return pd.DataFrame(columns=columns)
    logger.info(f"🧪 Sweep: {len(points)} points, estimator {spec.estimator}, jobs={jobs}")
    outer = jobs if len(points) > 1 else 1
    inner = 1 if len(points) > 1 else jobs
    rows = _map(_sweep_task, [(p, spec, thresholds, inner, timings) for p in points], outer)
    table = pd.DataFrame(rows, columns=columns)
    table = table.sort_values(["epsilon", "amplitude", "kappa"], kind="mergesort").reset_index(drop=True)
    logger.info(f"✅ Sweep done: {int((table['error'] != '').sum())} failed points")
    return table


def fit_sweep(table: pd.DataFrame) -> pd.DataFrame:
    """
    Power-law fits of value against each swept variable with the others held fixed.

    Returns:
        DataFrame with columns estimator, variable, slope, intercept, r2, n_points;
        the intercept is the empirical constant of the fit
    """
    columns = ["estimator", "variable", "fixed", "slope", "intercept", "r2", "n_points"]
    rows = []
    ok = table[(table["error"].fillna("") == "") & (table["value"] > 0)]
    variables = ("epsilon", "amplitude", "kappa")
    for estimator, group in ok.groupby("estimator", sort=True):
        for var in variables:
            others = [v for v in variables if v != var]
            for fixed, sub in group.groupby(others, sort=True):
                sub = sub.sort_values(var)
                if sub[var].nunique() < 3:
                    continue
                try:
                    fit = fit_power_law(sub[var].tolist(), sub["value"].tolist())
                except CellmixValidationError:
                    continue
                rows.append({
                    "estimator": estimator,
                    "variable": var,
                    "fixed": ";".join(f"{k}={float(v)!r}" for k, v in zip(others, fixed)),
                    "slope": fit.slope,
                    "intercept": fit.intercept,
                    "r2": fit.r2,
                    "n_points": fit.n_points,
                })
    return pd.DataFrame(rows, columns=columns)


def coupling_inequality_check(params: FlowParams, solver: SolverConfig, policy: StepPolicy, n_pairs: int,
                              seed: int, jobs: int = 1) -> Dict[str, float]:
    """
    Spectral t_mix against the empirical coupling bound 2 P(tau_cpl > t_mix).

    At t_mix the worst-case L1 distance is 1/2, so consistency requires
    2 P(tau_cpl > t_mix) >= 1/2 - 3 SE.
    """
    t_mix = spectral.mixing_time_tv(params, solver)
    pairs = coupling.starting_pairs(n_pairs, "grid", params, seed)
    outcomes = coupling.run_pairs(pairs, params, policy, seed, jobs)
    uncoupled = [not o.success or o.tau_cpl is None or o.tau_cpl > t_mix for o in outcomes]
    p = float(np.mean(uncoupled))
    se = 2.0 * math.sqrt(p * (1 - p) / n_pairs)
    bound = 2.0 * p
    return {
        "t_mix": t_mix,
        "p_uncoupled": p,
        "coupling_bound": bound,
        "se": se,
        "consistent": float(bound >= defaults.TV_THRESHOLD - 3.0 * se),
    }


def _event_time(path: np.ndarray, dt: float, params: FlowParams, event: str) -> Optional[float]:
    times = np.arange(len(path)) * dt
    if event == "entry":
        hit = stopping.first_band_entry(times, path, params.delta, params)
    else:
        hit = stopping.first_level_hit(times, path, 0.0, params)
    return None if hit is None else hit[1].time


def refinement_study(params: FlowParams, x0, t_end: float, dts: Sequence[float], samples: int = 32,
                     seed: int = 0, event: str = "tau0") -> Tuple[pd.DataFrame, Optional[FitResult]]:
    """
    Event-time convergence under step refinement on shared Brownian paths.

    Every dt must be an integer multiple of the smallest; errors are measured against
    the smallest dt. ``event`` is ``tau0`` (first separatrix hit) or ``entry``
    (first |H| <= delta).

    Returns:
        (DataFrame of dt, mean_abs_error, found; fit of error against dt when three or more
        coarse steps are given)
    """
    if event not in ("tau0", "entry"):
        raise CellmixValidationError("event must be tau0 or entry")
    dts = sorted(dts)
    finest = dts[0]
    factors = [int(round(d / finest)) for d in dts]
    if any(abs(f * finest - d) > 1e-9 * d for f, d in zip(factors, dts)):
        raise CellmixValidationError("every dt must be an integer multiple of the smallest")
    steps = int(math.ceil(t_end / (finest * factors[-1]))) * factors[-1]
    errors = {d: [] for d in dts[1:]}
    for s in range(samples):
        dw = brownian_increments(RngStream(seed, s), steps, finest)
        ref = _event_time(integrate_increments(x0, dw, finest, params), finest, params, event)
        if ref is None:
            continue
        for d, f in zip(dts[1:], factors[1:]):
            t = _event_time(integrate_increments(x0, coarsen_increments(dw, f), d, params), d, params, event)
            if t is not None:
                errors[d].append(abs(t - ref))
    rows = [{"dt": d, "mean_abs_error": float(np.mean(errors[d])) if errors[d] else float("nan"),
             "found": len(errors[d])} for d in dts[1:]]
    table = pd.DataFrame(rows, columns=["dt", "mean_abs_error", "found"])
    usable = table[table["mean_abs_error"] > 0]
    fit = fit_power_law(usable["dt"].tolist(), usable["mean_abs_error"].tolist()) if len(usable) >= 3 else None
    return table, fit
