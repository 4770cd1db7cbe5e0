"""
Tests for the crossing detectors and the separatrix clocks.

The clock tests drive the detectors with synthetic paths whose stream value is known in
closed form, so every event time can be computed by hand.
"""

import math

import numpy as np
import pytest

from cellmix.exceptions import StepTooLarge
from cellmix.models.params import FlowParams
from cellmix.services.sde import Trajectory
from cellmix.services.stopping import (
    ClockBuilder,
    axis_filtered_returns,
    boundary_layer_clock,
    detect_level_hit,
    detect_line_hit,
    diagonal_return_clock,
    first_band_entry,
)


@pytest.fixture
def params():
    # delta = sqrt(kappa/A) = 0.1
    return FlowParams(epsilon=0.25, amplitude=1.0, kappa=0.01)


class TestLineHit:
    """Crossings of the lattice offset + spacing * Z."""

    def test_interpolated_crossing(self):
        event = detect_line_hit((0.24, 0.1), (0.26, 0.1), 2.0, 1e-3, 0.25, axis=1)
        assert event.time == pytest.approx(2.0 + 5e-4)
        assert event.location[0] == 0.25
        assert event.kind == "vertical-line"
        assert event.index == 1

    def test_starting_on_the_line(self):
        event = detect_line_hit((0.25, 0.1), (0.26, 0.1), 2.0, 1e-3, 0.25, axis=1)
        assert event.time == 2.0

    def test_inside_one_lattice_cell(self):
        assert detect_line_hit((0.1, 0.1), (0.2, 0.1), 0.0, 1e-3, 0.25, axis=1) is None

    def test_horizontal_lines_with_offset(self):
        event = detect_line_hit((0.3, 0.09), (0.3, 0.11), 0.0, 1.0, 1.0, axis=2, offset=0.1)
        assert event.time == pytest.approx(0.5)
        assert event.location[1] == pytest.approx(0.1)
        assert event.kind == "horizontal-line"

    def test_large_step_rejected(self):
        with pytest.raises(StepTooLarge):
            detect_line_hit((0.1, 0.1), (0.3, 0.1), 0.0, 1e-3, 0.25, axis=1)


class TestLevelHit:
    """Level-set crossings of H."""

    def test_starting_on_the_level(self, params):
        event = detect_level_hit((0.0, 0.1), (0.01, 0.1), 1.5, 1e-3, 0.0, params)
        assert event.time == 1.5
        assert event.kind == "separatrix"

    def test_sign_change_near_the_midpoint(self, params):
        eps = params.epsilon
        a = math.asin(0.01) * eps / (2 * math.pi)
        event = detect_level_hit((-a, eps / 4), (a, eps / 4), 0.0, 1e-3, 0.0, params)
        assert event.time == pytest.approx(5e-4, abs=1e-8)
        assert event.location[0] == pytest.approx(0.0, abs=1e-12)

    def test_no_crossing(self, params):
        eps = params.epsilon
        assert detect_level_hit((eps / 8, eps / 4), (eps / 6, eps / 4), 0.0, 1e-3, 0.0, params) is None

    def test_positive_level_direction(self, params):
        eps = params.epsilon
        event = detect_level_hit((eps / 16, eps / 4), (eps / 5, eps / 4), 0.0, 1e-3, 0.5, params)
        assert event.kind == "level-up"
        assert abs(math.sin(params.wavenumber * event.location[0])) == pytest.approx(0.5, abs=1e-8)


class TestBandEntry:
    def test_entry_time(self, params):
        eps = params.epsilon
        times = np.array([0.0, 1.0])
        x_in = math.asin(0.05) * eps / (2 * math.pi)
        x_out = math.asin(0.15) * eps / (2 * math.pi)
        path = np.array([[x_out, eps / 4], [x_in, eps / 4]])
        k, event = first_band_entry(times, path, 0.1, params)
        assert k == 1
        h = math.sin(params.wavenumber * event.location[0])
        assert h == pytest.approx(0.1, abs=1e-8)


class TestBoundaryLayerClock:
    """Clock of a path with H(t) = 2 delta sin(10 t) along x2 = eps/4."""

    @pytest.fixture
    def clock(self, params):
        eps = params.epsilon
        delta = params.delta
        times = np.linspace(0.0, 0.7, 7001)
        x1 = np.arcsin(2 * delta * np.sin(10 * times)) / params.wavenumber
        states = np.stack([x1, np.full_like(x1, eps / 4)], axis=-1)
        return boundary_layer_clock(Trajectory(times, states, period=None), params)

    def test_first_hit_and_entry(self, clock):
        assert clock.entry_time == 0.0
        assert clock.tau0.time == 0.0

    def test_exit_and_return_times(self, clock):
        np.testing.assert_allclose(clock.sigma_times(), [math.pi / 60, 7 * math.pi / 60, 13 * math.pi / 60], atol=1e-5)
        np.testing.assert_allclose(clock.tau_times(), [math.pi / 10, math.pi / 5], atol=1e-5)

    def test_interlacing(self, clock):
        sigma = clock.sigma_times()
        tau = clock.tau_times()
        for n in range(len(tau)):
            assert sigma[n] <= tau[n] <= sigma[n + 1]

    def test_returns_on_vertical_lines_only(self, clock, params):
        assert [e.time for e in clock.tau_axis[1]] == clock.tau_times()
        assert clock.tau_axis[2] == []
        assert axis_filtered_returns(clock, 1, params.epsilon) == clock.tau_axis[1]

    def test_chunked_input_gives_the_same_clock(self, params):
        eps = params.epsilon
        times = np.linspace(0.0, 0.7, 7001)
        x1 = np.arcsin(2 * params.delta * np.sin(10 * times)) / params.wavenumber
        states = np.stack([x1, np.full_like(x1, eps / 4)], axis=-1)
        whole = boundary_layer_clock(Trajectory(times, states, period=None), params)
        chunks = [(times[i:i + 1001], states[i:i + 1001]) for i in range(0, 7000, 1000)]
        split = boundary_layer_clock(chunks, params)
        assert split.tau_times() == pytest.approx(whole.tau_times())
        assert split.sigma_times() == pytest.approx(whole.sigma_times())

    def test_corner_return_counts_for_both_axes(self, params):
        eps = params.epsilon
        corner = eps / 2
        builder = ClockBuilder(params, delta=0.5, diagonals=False)
        # tau0 on the vertical separatrix, exit through the cell centre, then a return
        # across x1 = eps/2 a hair below the corner
        times = np.array([0.0, 0.1, 0.2, 0.3, 0.4])
        path = np.array([
            [0.0, eps / 4],
            [eps / 16, eps / 4],
            [eps / 4, eps / 4],
            [corner - 1e-3, corner - 1e-12],
            [corner + 1e-3, corner - 1e-12],
        ])
        builder.update(times, path)
        clock = builder.finish()
        assert clock.tau0.time == 0.0
        assert len(clock.tau_seq) == 1
        event = clock.tau_seq[0]
        assert event.location == pytest.approx((corner, corner))
        assert event in clock.tau_axis[1]
        assert event in clock.tau_axis[2]


class TestDiagonalReturnClock:
    """Returns to {H = 0} that follow a crossing of a cell diagonal."""

    @staticmethod
    def _excursion(turn: float, eps: float) -> Trajectory:
        x2 = 0.0725
        out = np.linspace(-0.001, turn, 2000)
        back = np.linspace(turn, -0.001, 2000)[1:]
        x1 = np.concatenate([out, back])
        times = np.linspace(0.0, 1.0, len(x1))
        return Trajectory(times, np.stack([x1, np.full_like(x1, x2)], axis=-1), period=None)

    def test_return_without_diagonal(self, params):
        traj = self._excursion(0.02, params.epsilon)
        clock = boundary_layer_clock(traj, params)
        assert len(clock.tau_seq) == 1
        assert diagonal_return_clock(traj, params) == []

    def test_return_after_diagonal(self, params):
        traj = self._excursion(0.06, params.epsilon)
        events = diagonal_return_clock(traj, params)
        assert len(events) == 1
        assert events[0].location[0] == pytest.approx(0.0, abs=1e-12)
        assert events[0].time > 0.5
