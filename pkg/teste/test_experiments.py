"""
Tests for regime classification, bound predictions, fits and the sweep driver.
"""

import math
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from cellmix.config.defaults import get_canonical_point
from cellmix.config.settings import resolve_jobs
from cellmix.exceptions import CellmixValidationError, OutOfTheory, TooFewPoints
from cellmix.models.params import FlowParams, RegimeThresholds, SolverConfig, StepPolicy, SweepSpec
from cellmix.models.results import CouplingOutcome, MomentReport
from cellmix.services.experiments import (
    SWEEP_COLUMNS,
    classify_regime,
    coupling_inequality_check,
    crossing_lower_bound,
    crossing_rate_report,
    estimate_point,
    estimate_tau_check,
    fit_power_law,
    fit_sweep,
    moment_report,
    predicted_bound,
    reflected_crossing_times,
    refinement_study,
    run_sweep,
)


def _canonical(name: str) -> FlowParams:
    return FlowParams(**get_canonical_point(name))


class TestClassifyRegime:
    @pytest.mark.parametrize("name,label", [
        ("regime_I", "I"),
        ("regime_II", "II"),
        ("regime_III", "III"),
    ])
    def test_canonical_points(self, name, label):
        assert classify_regime(_canonical(name)).label == label

    def test_no_flow_is_out_of_theory(self):
        regime = classify_regime(FlowParams(epsilon=0.25, amplitude=0.0, kappa=1e-3))
        assert regime.label == "out-of-theory"
        assert not regime.in_theory()

    def test_weak_flow_is_out_of_theory(self):
        # 10 kappa / eps^2 = 0.16
        assert classify_regime(FlowParams(epsilon=0.25, amplitude=0.1, kappa=1e-3)).label == "out-of-theory"

    def test_cell_scale_check(self):
        params = _canonical("regime_I")
        thresholds = RegimeThresholds(enforce_cell_scale=True)
        assert classify_regime(params, thresholds).label == "out-of-theory"

    def test_margins(self):
        params = _canonical("regime_II")
        margins = classify_regime(params).margins
        assert margins["A_eps4_over_kappa"] == pytest.approx(100.0 * 0.125 ** 4 / 0.01)
        assert margins["eps2_over_kappa"] == pytest.approx(0.125 ** 2 / 0.01)


class TestPredictedBound:
    def test_regime_I_is_the_cell_time(self):
        bound = predicted_bound(_canonical("regime_I"))
        assert bound.label == "I"
        assert bound.value == pytest.approx(0.25 ** 2 / 1e-3)

    def test_regime_II_is_the_averaging_form(self):
        bound = predicted_bound(_canonical("regime_II"))
        assert bound.value == bound.averaging
        assert bound.cell_scaled > bound.averaging

    def test_regime_III(self):
        bound = predicted_bound(_canonical("regime_III"))
        assert bound.value == pytest.approx(1 / math.sqrt(1e-3 * 8.0))

    def test_continuous_at_the_III_boundary(self):
        eps, kappa = 0.25, 1e-3
        params = FlowParams(epsilon=eps, amplitude=kappa / eps ** 4, kappa=kappa)
        bound = predicted_bound(params)
        assert bound.label == "III"
        assert bound.value == pytest.approx(eps ** 2 / kappa)

    def test_out_of_theory(self):
        with pytest.raises(OutOfTheory):
            predicted_bound(FlowParams(epsilon=0.25, amplitude=0.0, kappa=1e-3))


class TestFitPowerLaw:
    def test_exact_power_law(self):
        x = [1.0, 2.0, 4.0, 8.0]
        fit = fit_power_law(x, [3.0 * v ** 2 for v in x])
        assert fit.slope == pytest.approx(2.0)
        assert fit.intercept == pytest.approx(math.log(3.0))
        assert fit.r2 == pytest.approx(1.0)
        assert fit.residual_band < 1e-12
        assert fit.n_points == 4

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            fit_power_law([1.0, 2.0], [1.0, 2.0])

    def test_unsorted_x(self):
        with pytest.raises(CellmixValidationError):
            fit_power_law([1.0, 3.0, 2.0], [1.0, 2.0, 3.0])

    def test_non_positive_y(self):
        with pytest.raises(CellmixValidationError):
            fit_power_law([1.0, 2.0, 3.0], [1.0, 0.0, 3.0])


class TestMoments:
    @staticmethod
    def _report(s2, s4) -> MomentReport:
        k = len(s2)
        nan = [float("nan")] * k
        return MomentReport(
            epsilon=0.5, n_values=list(range(1, k + 1)), samples=100, failures=0,
            mean_s=[0.0] * k, mean_s_se=nan, s2=s2, s2_se=nan, s4=s4, s4_se=nan,
            xi2=s2, xi2_se=nan, xi4=s4, xi4_se=nan,
        )

    def test_crossing_lower_bound(self):
        table = crossing_lower_bound(self._report([0.5, 0.1], [1.0, 0.5]))
        assert list(table.columns) == ["n", "level", "bound"]
        assert table["bound"].tolist() == pytest.approx([0.0625, 0.0])
        assert table["level"].tolist() == [0.5, 0.5]

    def test_explicit_level(self):
        table = crossing_lower_bound(self._report([0.5], [1.0]), level=0.0)
        assert table["bound"].iloc[0] == pytest.approx(0.25)

    def test_jensen(self):
        assert self._report([0.5], [0.3]).jensen_holds()
        assert not self._report([0.5], [0.2]).jensen_holds()

    def test_moment_report_needs_samples(self):
        with pytest.raises(CellmixValidationError):
            moment_report(_canonical("regime_II"), [1, 2], samples=10, seed=0)

    def test_moment_report_rejects_regime_III(self):
        with pytest.raises(CellmixValidationError):
            moment_report(_canonical("regime_III"), [1], samples=100, seed=0)

    def test_crossing_rates_need_samples(self):
        with pytest.raises(CellmixValidationError):
            crossing_rate_report(_canonical("regime_II"), [1], [1.0], samples=10, seed=0)


class TestReflectedCrossings:
    def test_times_are_reproducible_and_ordered(self):
        first = reflected_crossing_times(1, 1.0, 0.1, 1.0, samples=20, seed=2)
        again = reflected_crossing_times(1, 1.0, 0.1, 1.0, samples=20, seed=2)
        second = reflected_crossing_times(2, 1.0, 0.1, 1.0, samples=20, seed=2)
        np.testing.assert_array_equal(first, again)
        assert np.all(first > 0)
        assert np.all(second > first)

    def test_band_must_fit(self):
        with pytest.raises(CellmixValidationError):
            reflected_crossing_times(1, 1.0, 1.5, 1.0, samples=5, seed=0)


class TestSweep:
    """Grid sweeps with failures recorded in-row."""

    def test_out_of_theory_points_are_recorded(self):
        spec = SweepSpec(eps=[0.25], amp=[0.0, 0.1], kappa=[1e-3], estimator="deff11")
        table = run_sweep(spec)
        assert list(table.columns) == SWEEP_COLUMNS
        assert len(table) == 2
        assert (table["regime"] == "out-of-theory").all()
        assert table["value"].isna().all()
        assert (table["error"] != "").all()

    def test_allowed_out_of_theory_point(self):
        spec = SweepSpec(eps=[0.25], amp=[0.0], kappa=[1e-3], estimator="deff11", n=16,
                         allow_out_of_theory=True)
        table = run_sweep(spec, timings=True)
        assert table["value"].iloc[0] == pytest.approx(1e-3)
        assert table["error"].iloc[0] == ""
        assert "wall_time" in table.columns

    def test_rows_are_sorted(self):
        spec = SweepSpec(eps=[0.25], amp=[0.1, 0.0], kappa=[1e-3], estimator="deff11")
        table = run_sweep(spec)
        assert table["amplitude"].tolist() == [0.0, 0.1]

    def test_empty_grid(self):
        assert run_sweep(SweepSpec(estimator="deff11")).empty

    def test_unknown_estimator(self):
        with pytest.raises(ValueError):
            SweepSpec(estimator="t_wrong")

    def test_estimate_point(self):
        params = FlowParams(epsilon=0.25, amplitude=0.0, kappa=1e-3)
        out = estimate_point(params, SweepSpec(estimator="deff11", n=16))
        assert out["value"] == pytest.approx(1e-3)
        assert math.isnan(out["se"])
        assert (out["n_samples"], out["failures"]) == (1, 0)


class TestFitSweep:
    def test_fits_each_swept_variable(self):
        amps = [1.0, 4.0, 16.0]
        table = pd.DataFrame({
            "epsilon": [0.5] * 3,
            "amplitude": amps,
            "kappa": [0.01] * 3,
            "regime": ["I"] * 3,
            "estimator": ["t_mix"] * 3,
            "value": [2.0 * a ** -0.5 for a in amps],
            "se": [float("nan")] * 3,
            "n_samples": [1] * 3,
            "failures": [0] * 3,
            "error": [""] * 3,
        })
        fits = fit_sweep(table)
        assert len(fits) == 1
        row = fits.iloc[0]
        assert row["variable"] == "amplitude"
        assert row["fixed"] == "epsilon=0.5;kappa=0.01"
        assert row["slope"] == pytest.approx(-0.5)
        assert row["intercept"] == pytest.approx(math.log(2.0))

    def test_failed_rows_are_skipped(self):
        table = pd.DataFrame({
            "epsilon": [0.5] * 3,
            "amplitude": [1.0, 2.0, 4.0],
            "kappa": [0.01] * 3,
            "estimator": ["t_mix"] * 3,
            "value": [1.0, float("nan"), 0.5],
            "error": ["", "capped", ""],
        })
        assert fit_sweep(table).empty


class TestRefinementStudy:
    def test_unknown_event(self):
        params = FlowParams(epsilon=0.25, amplitude=1.0, kappa=0.01)
        with pytest.raises(CellmixValidationError):
            refinement_study(params, (0.1, 0.1), 0.1, [1e-3, 2e-3], event="exit")

    def test_steps_must_nest(self):
        params = FlowParams(epsilon=0.25, amplitude=1.0, kappa=0.01)
        with pytest.raises(CellmixValidationError):
            refinement_study(params, (0.1, 0.1), 0.1, [1e-3, 1.5e-3])

    def test_error_table(self):
        params = FlowParams(epsilon=0.25, amplitude=1.0, kappa=0.01)
        table, _ = refinement_study(params, (0.01, 0.05), 0.5, [1e-4, 2e-4, 4e-4], samples=4)
        assert table["dt"].tolist() == pytest.approx([2e-4, 4e-4])
        assert (table["found"] <= 4).all()


class TestCouplingInequality:
    def test_bound_from_uncoupled_fraction(self):
        params = FlowParams(epsilon=0.5, amplitude=1.0, kappa=0.1)
        outcomes = [CouplingOutcome(success=True, tau_cpl=0.5) for _ in range(3)]
        outcomes.append(CouplingOutcome(success=False, failure="stage1: capped"))
        with patch("cellmix.services.experiments.spectral.mixing_time_tv", return_value=1.0), \
                patch("cellmix.services.experiments.coupling.run_pairs", return_value=outcomes):
            out = coupling_inequality_check(params, SolverConfig(n=16), StepPolicy(dt=1e-3), n_pairs=4, seed=0)
        assert out["t_mix"] == 1.0
        assert out["p_uncoupled"] == pytest.approx(0.25)
        assert out["coupling_bound"] == pytest.approx(0.5)
        assert out["consistent"] == 1.0


@pytest.mark.slow
class TestSeparatrixStatistics:
    """Clock-based estimators at acceptance scale."""

    def test_lifted_walk_moments(self, resolved_policy):
        params = _canonical("regime_I")
        eps = params.epsilon
        n_values = [4, 8, 16]
        report = moment_report(params, n_values, samples=100, seed=0, policy=resolved_policy(params),
                               jobs=resolve_jobs(None))
        assert report.failures == 0
        for mean, se in zip(report.mean_s, report.mean_s_se):
            assert abs(mean) <= 3 * se
        assert fit_power_law(n_values, report.s2).slope == pytest.approx(1.0, abs=0.2)
        scaled = [s4 / (n ** 2 * eps ** 4) for n, s4 in zip(n_values, report.s4)]
        assert max(scaled) <= 10 * min(scaled)
        assert report.jensen_holds()

    def test_diagonal_return_time_slope(self, resolved_policy):
        amplitudes = [2.0, 8.0, 32.0]
        means = []
        for amp in amplitudes:
            params = FlowParams(epsilon=0.0625, amplitude=amp, kappa=1e-3)
            table = estimate_tau_check(params, samples=500, seed=0, policy=resolved_policy(params),
                                       jobs=resolve_jobs(None))
            assert table["failures"].iloc[0] <= 5
            means.append(float(table["value"].iloc[0]))
        assert fit_power_law(amplitudes, means).slope == pytest.approx(-0.5, abs=0.1)
