"""
Tests for the staged coupling: noise transforms, core regions, single stages and full runs.
"""

import math

import numpy as np
import pytest

from cellmix.config.settings import resolve_jobs
from cellmix.exceptions import CellmixValidationError, DegeneratePair, DesyncDetected
from cellmix.models.params import FlowParams, StepPolicy
from cellmix.models.results import STAGES, CouplingOutcome
from cellmix.services.coupling import (
    CellRegions,
    NoiseTransform,
    PairRelation,
    PairRunner,
    _LineDetector,
    _wrap,
    estimate_tau_cpl,
    marginal_tv_check,
    reflection_transform,
    run_full_coupling,
    run_pairs,
    stage1_couple_projections,
    stage2_sync_to_lattice,
    stage3_mirror_to_bisector,
    starting_pairs,
    summarize_outcomes,
)
from cellmix.services.experiments import classify_regime, fit_power_law
from cellmix.services.rng import RngStream


@pytest.fixture
def params():
    return FlowParams(epsilon=0.5, amplitude=1.0, kappa=0.1)


class TestReflectionTransform:
    """Reflection across the perpendicular bisector of a pair."""

    def test_axis_aligned(self):
        t = reflection_transform((0.3, 0.2), (0.1, 0.2))
        np.testing.assert_allclose(t.matrix, [[-1.0, 0.0], [0.0, 1.0]], atol=1e-15)

    def test_diagonal(self):
        t = reflection_transform((0.2, 0.2), (0.1, 0.1))
        np.testing.assert_allclose(t.matrix, [[0.0, -1.0], [-1.0, 0.0]], atol=1e-15)

    def test_orthogonal_symmetric_improper(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            y, yt = rng.random(2), rng.random(2)
            m = reflection_transform(y, yt, period=0.25).matrix
            assert reflection_transform(y, yt).is_orthogonal()
            np.testing.assert_allclose(m, m.T, atol=1e-15)
            assert np.linalg.det(m) == pytest.approx(-1.0)

    def test_uses_the_shortest_displacement(self):
        t = reflection_transform((0.24, 0.1), (0.01, 0.1), period=0.25)
        np.testing.assert_allclose(t.matrix, [[-1.0, 0.0], [0.0, 1.0]], atol=1e-15)

    def test_coincident_points(self):
        with pytest.raises(DegeneratePair):
            reflection_transform((0.1, 0.1), (0.1, 0.1))


class TestNoiseTransform:
    def test_mirror(self):
        np.testing.assert_array_equal(NoiseTransform.mirror(1).matrix, [[-1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(NoiseTransform.mirror(2).matrix, [[1.0, 0.0], [0.0, -1.0]])

    def test_independent_flag(self):
        assert NoiseTransform.independent_noise().independent
        assert not NoiseTransform.identity().independent


class TestCellRegions:
    """Drift-free cores of the quarter cells."""

    @pytest.fixture
    def regions(self, params):
        return CellRegions(params)

    def test_centre_is_in_the_core(self, regions, params):
        eps = params.epsilon
        centre = np.array([[eps / 4, eps / 4]])
        assert regions.in_u_prime(centre)[0]
        assert regions.in_u(centre)[0]

    def test_separatrix_is_outside(self, regions):
        assert not regions.in_u(np.array([[0.0, 0.1]]))[0]

    def test_quarter_indices(self, regions, params):
        eps = params.epsilon
        pts = np.array([[eps / 4, eps / 4], [eps / 4, 3 * eps / 4], [3 * eps / 4, eps / 4], [3 * eps / 4, 3 * eps / 4]])
        np.testing.assert_array_equal(regions.quarter(pts), [0, 1, 2, 3])

    def test_same_core_across_cells(self, regions, params):
        eps = params.epsilon
        y = np.array([[eps / 4, eps / 4]])
        assert regions.same_core(y, y + eps)[0]
        assert not regions.same_core(y, y + np.array([[eps / 2, 0.0]]))[0]

    def test_core_fraction(self, regions):
        fraction = regions.u_prime_fraction(samples=20_000)
        assert 0.0 < fraction < 0.5
        assert regions.pair_probability(samples=20_000) == pytest.approx(fraction ** 2 / 4, rel=1e-12)

    def test_rejects_h0_out_of_range(self, params):
        with pytest.raises(CellmixValidationError):
            CellRegions(params, h0=0.7)
        with pytest.raises(CellmixValidationError):
            CellRegions(params, h0=1.0)


class TestStages:
    """Single stages of the coupling."""

    def test_sync_already_on_the_lattice(self, params):
        policy = StepPolicy(dt=1e-3, t_max=1.0)
        x = np.array([0.25, 0.3])
        xt = np.array([0.75, 0.8])
        sigma, xe, xte = stage2_sync_to_lattice(x, xt, 1, params, policy, RngStream(0, 0, width=4))
        assert sigma == 0.0
        assert xe[0] == 0.25
        assert xte[0] == 0.75

    def test_mirror_with_equal_coordinates(self, params):
        policy = StepPolicy(dt=1e-3, t_max=1.0)
        x = np.array([0.25, 0.3])
        xt = np.array([0.25, 0.8])
        tau, xe, xte = stage3_mirror_to_bisector(x, xt, 1, params, policy, RngStream(0, 0, width=4))
        assert tau == 0.0
        assert xte[0] == xe[0]

    def test_sync_keeps_projections_matched(self, params):
        eps = params.epsilon
        policy = StepPolicy(dt=1e-3, t_max=50.0)
        x = np.array([0.1, 0.3])
        xt = x + eps
        sigma, xe, xte = stage2_sync_to_lattice(x, xt, 1, params, policy, RngStream(2, 0, width=4))
        assert sigma > 0.0
        assert xe[0] / (eps / 2) == pytest.approx(round(xe[0] / (eps / 2)), abs=1e-12)
        assert np.max(np.abs(_wrap(xe - xte, eps))) <= 1e-8 * eps

    def test_mirror_relation_holds_until_the_bisector(self, params):
        eps = params.epsilon
        policy = StepPolicy(dt=1e-3, t_max=50.0)
        rng = RngStream(4, 0, width=4)
        runner = PairRunner(params, policy, rng, observe_times=[0.001 * j for j in range(1, 11)])
        outcome = CouplingOutcome()
        x = np.array([0.0, 0.3])
        xt = np.array([0.5, 0.8])
        tau, xe, xte = stage3_mirror_to_bisector(x, xt, 1, params, policy, rng, 0.0, runner, outcome)
        assert tau > 0.0
        assert xe[0] == xte[0]
        assert abs(_wrap(xe[0] - eps / 2, eps)) <= 1e-9
        assert abs(_wrap(xe[1] - xte[1], eps)) <= 1e-6 * eps
        assert outcome.mirror_residual <= 1e-6 * eps
        assert runner.observations
        for y, yt in runner.observations.values():
            assert abs(_wrap(y[0] + yt[0], eps)) <= 1e-6 * eps
            assert abs(_wrap(y[1] - yt[1], eps)) <= 1e-6 * eps


class TestPairRelation:
    """Partner relations held by the synchronous and mirror stages."""

    def test_broken_symmetry_is_detected(self, params):
        policy = StepPolicy(dt=1e-3, t_max=1.0)
        runner = PairRunner(params, policy, RngStream(0, 0, width=4))
        x = np.array([0.1, 0.3])
        xt = x + np.array([0.1, 0.0])
        relation = PairRelation.synchronous(x, xt, 1e-8 * params.epsilon, "stage2 axis 1")
        with pytest.raises(DesyncDetected):
            runner.run(x, xt, 0.0, NoiseTransform.identity(), lambda times, path, path_t: None, "stage2", relation)

    def test_anchored_partner_follows_the_relation(self, params):
        policy = StepPolicy(dt=1e-3, t_max=50.0)
        runner = PairRunner(params, policy, RngStream(0, 0, width=4))
        x = np.array([0.0, 0.3])
        xt = np.array([0.5, 0.8])
        relation = PairRelation.mirror(x, xt, 1, 1e-6, "stage3 axis 1")
        detector = _LineDetector(1, 1.0, 0.25, lambda path, path_t: 0.0, 1.0, "stage3 axis 1")
        _, xe, xte, _ = runner.run(x, xt, 0.0, NoiseTransform.mirror(1), detector, "stage3", relation)
        np.testing.assert_allclose(xte, relation.sign * xe + relation.offset, atol=1e-12)
        assert relation.worst <= 1e-6


class TestStageOne:
    def test_matching_projections_need_no_time(self, params):
        x, xt = np.array([0.125, 0.25]), np.array([0.625, 0.75])
        d, xe, xte = stage1_couple_projections(x, xt, params, CellRegions(params), StepPolicy(dt=1e-3),
                                               RngStream(0, 0, width=4))
        assert d == 0.0
        np.testing.assert_array_equal(xe, x)
        np.testing.assert_allclose(np.mod(xte - xe, params.epsilon), 0.0, atol=1e-15)


class TestFullCoupling:
    """All stages for one pair."""

    def test_identical_points(self, params):
        outcome = run_full_coupling((0.3, 0.4), (0.3, 0.4), params, StepPolicy(dt=1e-3), RngStream(0, 0, width=4))
        assert outcome.success
        assert outcome.tau_cpl == 0.0
        assert set(outcome.stage_durations) == set(STAGES)
        assert all(d == 0.0 for d in outcome.stage_durations.values())

    @pytest.mark.slow
    def test_same_projection_skips_stage_one(self, params):
        policy = StepPolicy(dt=1e-3, t_max=200.0)
        outcome = run_full_coupling((0.125, 0.25), (0.625, 0.75), params, policy, RngStream(3, 0, width=4))
        assert outcome.success, outcome.failure
        assert outcome.stage_durations["stage1"] == 0.0
        assert outcome.tau_cpl == pytest.approx(sum(outcome.stage_durations.values()))
        final = outcome.glue_positions["stage3h"]
        assert final[0] == final[1]

    def test_cap_is_reported_as_failure(self, params):
        policy = StepPolicy(dt=1e-3, t_max=1e-3)
        outcome = run_full_coupling((0.1, 0.2), (0.35, 0.45), params, policy, RngStream(0, 0, width=4))
        assert not outcome.success
        assert outcome.tau_cpl is None
        assert outcome.failure.startswith("stage")

    @pytest.mark.slow
    def test_random_pair_couples(self, params):
        policy = StepPolicy(dt=1e-3)
        outcome = run_full_coupling((0.1, 0.2), (0.35, 0.9), params, policy, RngStream(1, 0, width=4))
        assert outcome.success, outcome.failure
        assert outcome.stage1_attempts >= 1
        assert outcome.mirror_residual <= 1e-6 * params.epsilon
        for stage in STAGES:
            assert 0.0 <= outcome.stage_durations[stage] < math.inf


class TestStartingPairs:
    def test_uniform_pairs_are_reproducible(self, params):
        a = starting_pairs(5, "uniform", params, seed=3)
        b = starting_pairs(5, "uniform", params, seed=3)
        for (x, xt), (y, yt) in zip(a, b):
            np.testing.assert_array_equal(x, y)
            np.testing.assert_array_equal(xt, yt)
            assert np.all((x >= 0) & (x < 1))

    def test_grid_pairs_cycle(self, params):
        pairs = starting_pairs(32, "grid", params, seed=0)
        np.testing.assert_array_equal(pairs[0][0], pairs[16][0])
        np.testing.assert_allclose(pairs[0][1], np.mod(pairs[0][0] + 0.5, 1.0))

    def test_unknown_distribution(self, params):
        with pytest.raises(CellmixValidationError):
            starting_pairs(5, "corners", params, seed=0)


class TestStatistics:
    """Coupling-time summaries."""

    def test_identical_pairs_have_zero_mean(self, params):
        pairs = [(np.array([0.3, 0.3]), np.array([0.3, 0.3]))] * 30
        outcomes = run_pairs(pairs, params, StepPolicy(dt=1e-3), seed=0)
        stats = summarize_outcomes(outcomes)
        assert stats.n_samples == 30
        assert stats.failures == 0
        assert stats.mean == 0.0

    def test_failures_are_counted(self):
        outcomes = [CouplingOutcome(success=True, tau_cpl=t) for t in (1.0, 2.0, 3.0)]
        outcomes.append(CouplingOutcome(success=False, failure="stage1: capped"))
        stats = summarize_outcomes(outcomes)
        assert stats.n_samples == 4
        assert stats.failures == 1
        assert stats.mean == pytest.approx(2.0)
        assert stats.median == pytest.approx(2.0)
        assert stats.se == pytest.approx(1.0 / math.sqrt(3))

    def test_needs_thirty_pairs(self, params):
        with pytest.raises(CellmixValidationError):
            estimate_tau_cpl(params, 10, "uniform", StepPolicy(), seed=0)


class TestMarginalCheck:
    def test_glued_partners_share_their_marginal(self, params):
        out = marginal_tv_check(params, StepPolicy(dt=1e-3), 0.05, n_pairs=4, seed=0, x=(0.3, 0.4), xt=(0.3, 0.4))
        assert out["tv"] == 0.0
        assert out["p_uncoupled"] == 0.0
        assert out["holds"] == 1.0


def _brownian_stage_one(x, xt, regions, kappa, dt, rng, chunk=1000):
    """Independent Brownian motions until a shared core, then reflection until they meet or leave it."""
    eps = regions.eps
    sigma = math.sqrt(kappa * dt)
    t = 0.0
    while True:
        while not regions.same_core(x[None, :], xt[None, :])[0]:
            path = x + np.cumsum(sigma * rng.standard_normal((chunk, 2)), axis=0)
            path_t = xt + np.cumsum(sigma * rng.standard_normal((chunk, 2)), axis=0)
            hits = np.flatnonzero(regions.same_core(path, path_t))
            k = int(hits[0]) if hits.size else chunk - 1
            x, xt = path[k], path_t[k]
            t += (k + 1) * dt
        quarter = regions.quarter(x[None, :])[0]
        d = _wrap(x - xt, eps)
        normal = d / np.linalg.norm(d)
        while True:
            b = np.cumsum(sigma * rng.standard_normal((chunk, 2)), axis=0)
            path = x + b
            path_t = xt + b - 2.0 * np.outer(b @ normal, normal)
            met = np.flatnonzero(_wrap(path - path_t, eps) @ normal <= 0)
            inside = (regions.in_u(path) & regions.in_u(path_t)
                      & (regions.quarter(path) == quarter) & (regions.quarter(path_t) == quarter))
            left = np.flatnonzero(~inside)
            k_met = int(met[0]) if met.size else chunk
            k_left = int(left[0]) if left.size else chunk
            if k_met < chunk and k_met <= k_left:
                return t + (k_met + 1) * dt
            k = min(k_left, chunk - 1)
            x, xt = path[k], path_t[k]
            t += (k + 1) * dt
            if k_left < chunk:
                break


@pytest.mark.slow
class TestCouplingScalings:
    """Acceptance-scale coupling statistics."""

    def test_mirror_relation_over_many_runs(self, resolved_policy):
        params = FlowParams(epsilon=0.125, amplitude=100.0, kappa=0.01)
        eps = params.epsilon
        policy = resolved_policy(params, fraction=0.25, t_max=20.0)
        heights = RngStream(0, 2 ** 40).uniforms(100)
        worst = 0.0
        for i, y in enumerate(heights):
            outcome = CouplingOutcome()
            x = np.array([0.0, y])
            xt = np.array([eps, np.mod(y + eps * (i % 3), 1.0)])
            stage3_mirror_to_bisector(x, xt, 1, params, policy, RngStream(0, i, width=4), outcome=outcome)
            worst = max(worst, outcome.mirror_residual)
        assert worst <= 1e-6

    def test_drift_free_stage_one_matches_brownian_pairs(self):
        params = FlowParams(epsilon=0.5, amplitude=0.0, kappa=0.1)
        regions = CellRegions(params)
        policy = StepPolicy(dt=1e-3)
        pairs = starting_pairs(200, "uniform", params, seed=5)
        measured = [
            stage1_couple_projections(x, xt, params, regions, policy, RngStream(5, i, width=4))[0]
            for i, (x, xt) in enumerate(pairs)
        ]
        rng = np.random.default_rng(5)
        oracle = [_brownian_stage_one(x.copy(), xt.copy(), regions, params.kappa, 1e-3, rng) for x, xt in pairs]
        ratio = np.mean(measured) / np.mean(oracle)
        assert 1 / 3 <= ratio <= 3

    def test_regime_three_coupling_time_slope(self, resolved_policy):
        amplitudes = [2.0, 8.0, 32.0]
        means = []
        for amp in amplitudes:
            params = FlowParams(epsilon=0.0625, amplitude=amp, kappa=1e-3)
            assert classify_regime(params).label == "III"
            policy = resolved_policy(params)
            stats, _ = estimate_tau_cpl(params, 200, "uniform", policy, seed=0, jobs=resolve_jobs(None))
            assert stats.failures <= 2
            means.append(stats.mean)
        assert fit_power_law(amplitudes, means).slope == pytest.approx(-0.5, abs=0.15)

    def test_cell_diffusion_scaling(self, resolved_policy):
        kappa = 0.01
        cells = [0.25, 0.125, 0.0625]
        means = []
        for eps in cells:
            params = FlowParams(epsilon=eps, amplitude=2 * kappa / eps ** 4, kappa=kappa)
            assert classify_regime(params).label in ("I", "II")
            policy = resolved_policy(params)
            regions = CellRegions(params)
            durations = []
            for i, (x, xt) in enumerate(starting_pairs(200, "uniform", params, seed=1)):
                rng = RngStream(1, i, width=4)
                runner = PairRunner(params, policy, rng)
                d1, x, xt = stage1_couple_projections(x, xt, params, regions, policy, rng, 0.0, runner)
                d2, _, _ = stage2_sync_to_lattice(x, xt, 1, params, policy, rng, d1, runner)
                durations.append(d1 + d2)
            means.append(np.mean(durations))
        assert fit_power_law(cells, means).slope == pytest.approx(2.0, abs=0.3)
