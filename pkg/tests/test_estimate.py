import functools
import math

import numpy as np
import pytest

from kinetics.errors import ArgumentError, ConfigurationError
from kinetics.estimate import (StopRule, convergence_orders, efficiency_index, error_density,
                               get_available_estimators, get_estimator, lhs_approx_estimate,
                               lhs_approx_sample, mc_mean, rhs_dual_estimate, rhs_estimate,
                               work_comparison_experiment, work_estimates)
from kinetics.kbe import build_lattice, solve_backward
from kinetics.model import ReactionNetwork, load_model_file, tau_leap_decay_mean
from kinetics.simulate import uniform_grid


def _normal_sampler(mean, sd, rng):
    return rng.generator.normal(mean, sd)


class TestStopRule:
    def test_rejects_tiny_floor(self):
        with pytest.raises(ConfigurationError):
            StopRule(min_samples=1)

    def test_rejects_inverted_caps(self):
        with pytest.raises(ConfigurationError):
            StopRule(min_samples=200, max_samples=100)

    def test_fixed(self):
        stop = StopRule.fixed(30, seed=4)
        assert stop.min_samples == stop.max_samples == 30
        assert stop.batch_size == 30


class TestMonteCarloMean:
    def test_deterministic_functional_stops_at_floor(self):
        estimate = mc_mean(lambda rng: 3.0, StopRule())
        assert estimate.n_samples == 100
        assert estimate.value == 3.0
        assert estimate.standard_error == 0.0
        assert estimate.converged

    def test_normal_functional_respects_floor(self):
        estimate = mc_mean(functools.partial(_normal_sampler, 1.0, 0.2), StopRule())
        assert estimate.n_samples == 100
        assert estimate.converged

    def test_normal_functional_without_floor(self):
        stop = StopRule(min_samples=2, batch_size=1)
        estimate = mc_mean(functools.partial(_normal_sampler, 1.0, 0.2), stop)
        assert estimate.n_samples <= 40
        assert 1.96 * estimate.standard_error <= 0.1 * abs(estimate.value)

    def test_zero_mean_is_flagged(self):
        stop = StopRule(max_samples=300)
        estimate = mc_mean(functools.partial(_normal_sampler, 0.0, 1.0), stop)
        assert estimate.n_samples == 300
        assert not estimate.converged

    def test_all_zero_samples_converge_at_floor(self):
        estimate = mc_mean(lambda rng: 0.0, StopRule())
        assert estimate.n_samples == 100
        assert estimate.converged
        assert estimate.standard_error == 0.0

    def test_same_seed_same_samples(self):
        sampler = functools.partial(_normal_sampler, 0.0, 1.0)
        first = mc_mean(sampler, StopRule.fixed(50, seed=9))
        second = mc_mean(sampler, StopRule.fixed(50, seed=9))
        assert np.array_equal(first.samples, second.samples)

    def test_worker_count_does_not_change_result(self, decay3):
        net, obs = decay3
        sampler = functools.partial(lhs_approx_sample, net, uniform_grid(1.0, 0.25), obs)
        serial = mc_mean(sampler, StopRule.fixed(64, seed=5, workers=1))
        parallel = mc_mean(sampler, StopRule.fixed(64, seed=5, workers=4))
        assert np.array_equal(serial.samples, parallel.samples)
        assert serial.value == parallel.value


class TestConstantPropensity:
    def test_lhs_approx_is_zero(self, constant_network):
        net, obs = constant_network
        estimate = lhs_approx_estimate(net, uniform_grid(1.0, 0.25), StopRule.fixed(20), obs)
        assert np.all(estimate.samples == 0.0)
        assert estimate.value == 0.0
        assert estimate.mean_steps == 4

    def test_rhs_dual_and_density_are_zero(self, constant_network):
        net, obs = constant_network
        estimate = rhs_dual_estimate(net, uniform_grid(1.0, 0.25), StopRule.fixed(20), observable=obs)
        assert estimate.value == 0.0
        assert np.all(estimate.per_channel_density == 0.0)
        report = work_estimates(uniform_grid(1.0, 0.25), estimate.per_channel_density)
        assert report.degenerate
        assert report.optimal_steps == report.uniform_steps == 0.0


class TestDensity:
    def test_density_recovers_estimate(self, decay3):
        net, obs = decay3
        grid = uniform_grid(1.0, 0.25)
        estimate = error_density(net, grid, 50, observable=obs)
        assert estimate.per_channel_density.shape == (4, 1)
        assert np.all(estimate.per_channel_density >= 0)
        recovered = np.sum(np.diff(grid)[:, np.newaxis] ** 2 * estimate.signed_density)
        assert recovered == pytest.approx(estimate.value)
        assert estimate.per_interval_density.shape == (4,)

    def test_weight_time_variants(self, decay1):
        net, obs = decay1
        grid = uniform_grid(1.0, 0.25)
        later = rhs_dual_estimate(net, grid, StopRule.fixed(30), 'at-n-plus-1', obs)
        earlier = rhs_dual_estimate(net, grid, StopRule.fixed(30), 'at-n', obs)
        assert later.n_samples == earlier.n_samples == 30
        with pytest.raises(ConfigurationError):
            rhs_dual_estimate(net, grid, StopRule.fixed(30), 'midpoint', obs)

    def test_unknown_source(self, decay1):
        net, _ = decay1
        with pytest.raises(ConfigurationError):
            error_density(net, uniform_grid(1.0, 0.5), 10, source='oracle')
        with pytest.raises(ConfigurationError):
            error_density(net, uniform_grid(1.0, 0.5), 10, source='true-dual')

    def test_true_dual_needs_snapshots_on_grid(self, decay1):
        net, obs = decay1
        vf = solve_backward(net, build_lattice(net, 'full'), [0.0, 0.5], observable=obs)
        with pytest.raises(ConfigurationError):
            rhs_estimate(net, uniform_grid(1.0, 0.25), vf, StopRule.fixed(10))
        estimate = error_density(net, uniform_grid(1.0, 0.5), 10, source='true-dual', vf=vf)
        assert estimate.kind == 'rhs'
        assert estimate.per_channel_density.shape == (2, 1)

    def test_zero_reaction_network(self):
        net = ReactionNetwork(['X'], [], [4], 1.0, [1.0], [4])
        grid = uniform_grid(1.0, 0.5)
        assert rhs_dual_estimate(net, grid, StopRule.fixed(5)).value == 0.0
        assert lhs_approx_estimate(net, grid, StopRule.fixed(5)).value == 0.0


class TestWorkEstimates:
    def test_concentrated_density(self):
        report = work_estimates(uniform_grid(1.0, 0.25), [4.0, 0.0, 0.0, 0.0], current_work=4)
        assert report.optimal_work == pytest.approx(0.25)
        assert report.uniform_work == pytest.approx(1.0)
        assert report.total_error == pytest.approx(0.25)
        assert report.optimal_steps == pytest.approx(1.0)
        assert report.uniform_steps == pytest.approx(4.0)

    def test_constant_density_on_uniform_grid(self):
        report = work_estimates(uniform_grid(2.0, 0.25), np.full(8, 3.0))
        assert report.optimal_work == pytest.approx(report.uniform_work)
        assert report.uniform_work == pytest.approx(4.0 * 3.0)

    def test_per_channel_density_is_summed(self):
        rho = np.array([[1.0, 3.0], [0.0, 0.0]])
        assert work_estimates([0.0, 0.5, 1.0], rho).uniform_work == pytest.approx(2.0)

    def test_signed_target_sets_step_counts(self):
        # contributions cancelling to 0.05 need more uniform steps than the absolute sum suggests
        report = work_estimates(uniform_grid(1.0, 0.25), [4.0, 0.0, 0.0, 0.0], current_work=4,
                                target_error=-0.05)
        assert report.total_error == pytest.approx(0.05)
        assert report.uniform_steps == pytest.approx(20.0)
        assert report.optimal_steps == pytest.approx(5.0)

    def test_decay_example2_steps_match_current(self):
        net, obs = load_model_file('decay_example2')
        grid = uniform_grid(1.0, 1 / 64)
        estimate = rhs_dual_estimate(net, grid, StopRule.fixed(20, seed=61), observable=obs)
        report = work_estimates(grid, estimate.per_interval_density, estimate.mean_steps,
                                target_error=estimate.value)
        assert report.current_work == 64
        assert report.uniform_steps == pytest.approx(64, rel=0.02)
        assert report.optimal_steps == pytest.approx(64, rel=0.02)
        assert report.optimal_work <= report.uniform_work

    def test_rejects_negative_density(self):
        with pytest.raises(ArgumentError):
            work_estimates([0.0, 1.0], [-1.0])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            work_estimates([0.0, 0.5, 1.0], [1.0])


class TestEfficiencyIndex:
    def test_identical_sets(self):
        rng = np.random.default_rng(3)
        small = rng.normal(1.0, 0.3, 100)
        large = rng.normal(1.0, 0.3, 1600)
        narrow = efficiency_index(large, large)
        wide = efficiency_index(small, small)
        assert narrow.index == pytest.approx(1.0)
        assert narrow.contains(1.0)
        assert (narrow.ci_high - narrow.ci_low) < 0.5 * (wide.ci_high - wide.ci_low)

    def test_scale_invariant(self):
        rng = np.random.default_rng(5)
        lhs = rng.normal(2.0, 0.5, 300)
        rhs = rng.normal(1.8, 0.4, 300)
        base = efficiency_index(lhs, rhs, seed=7)
        scaled = efficiency_index(7.5 * lhs, 7.5 * rhs, seed=7)
        assert scaled.index == pytest.approx(base.index)
        assert scaled.ci_low == pytest.approx(base.ci_low)
        assert scaled.ci_high == pytest.approx(base.ci_high)

    def test_unstable_when_rhs_is_indistinguishable_from_zero(self):
        rhs = np.tile([-1.0, 1.0, 0.5, -0.5], 10)
        result = efficiency_index(np.full(40, 1.0), rhs)
        assert result.unstable
        assert result.ci_low == -math.inf and result.ci_high == math.inf

    def test_empty(self):
        with pytest.raises(ArgumentError):
            efficiency_index([], [1.0])


def test_convergence_orders():
    assert convergence_orders([0.4, 0.2, 0.1], [0.5, 0.25, 0.125]) == pytest.approx([1.0, 1.0])
    assert math.isnan(convergence_orders([0.0, 0.1], [0.5, 0.25])[0])


def test_work_comparison_on_linear_decay():
    rows = work_comparison_experiment(1, [100, 1000], 0.1, StopRule.fixed(40), ssa_paths=10)
    assert [row.work_tl for row in rows] == [10.0, 10.0]
    assert [row.tau for row in rows] == pytest.approx([0.1, 0.1])
    ratio = rows[1].work_ssa / rows[0].work_ssa
    assert 8 <= ratio <= 12
    assert rows[0].work_ssa == pytest.approx(100 * (1 - math.exp(-1.0)), rel=0.15)


def test_registry():
    names = {info['name'] for info in get_available_estimators()}
    assert names == {'lhs_approx', 'rhs', 'rhs_dual'}
    assert get_estimator('rhs').needs_value_function
    with pytest.raises(ConfigurationError):
        get_estimator('rhs').estimate(None, [0.0, 1.0], StopRule.fixed(2), None)
    with pytest.raises(ConfigurationError):
        get_estimator('midpoint')


@pytest.mark.slow
class TestDecayAccuracy:
    def test_lhs_approx_matches_weak_error(self, decay1):
        net, obs = decay1
        grid = uniform_grid(1.0, 1 / 8)
        estimate = lhs_approx_estimate(net, grid, StopRule.fixed(4000, seed=21), obs)
        weak_error = 10 * math.exp(-0.2) - tau_leap_decay_mean(10, 0.2, grid)
        assert abs(estimate.value - weak_error) < 3 * estimate.standard_error

    def test_rhs_and_rhs_dual_agree(self, decay1):
        net, obs = decay1
        grid = uniform_grid(1.0, 1 / 16)
        vf = solve_backward(net, build_lattice(net, 'full'), grid, observable=obs)
        rhs = rhs_estimate(net, grid, vf, StopRule.fixed(2000, seed=23))
        dual = rhs_dual_estimate(net, grid, StopRule.fixed(2000, seed=23), observable=obs)
        assert rhs.value > 0
        assert abs(rhs.value - dual.value) < 3 * math.hypot(rhs.standard_error, dual.standard_error)
        index = efficiency_index(rhs.samples, dual.samples)
        assert index.contains(1.0)

    def test_first_order_convergence(self, decay1):
        net, obs = decay1
        values = [rhs_dual_estimate(net, uniform_grid(1.0, tau), StopRule.fixed(4000, seed=29),
                                    observable=obs).value
                  for tau in (1 / 8, 1 / 16)]
        order = convergence_orders(values, [1 / 8, 1 / 16])[0]
        assert 0.7 <= order <= 1.3

    def test_efficiency_index_at_fine_step(self, decay1):
        net, obs = decay1
        grid = uniform_grid(1.0, 1 / 32)
        lhs = lhs_approx_estimate(net, grid, StopRule.fixed(20_000, seed=31, workers=4), obs)
        dual = rhs_dual_estimate(net, grid, StopRule.fixed(20_000, seed=37, workers=4), observable=obs)
        index = efficiency_index(lhs.samples, dual.samples)
        assert not index.unstable
        assert index.contains(1.0)


@pytest.mark.slow
def test_dimer_work_concentrates_in_transient(dimer):
    net, obs = dimer
    grid = uniform_grid(1.0, 1 / 1024)
    estimate = rhs_dual_estimate(net, grid, StopRule.fixed(880, seed=67, workers=4), observable=obs)
    report = work_estimates(grid, estimate.per_interval_density, estimate.mean_steps,
                            target_error=estimate.value)
    assert 70.6 / 3 <= report.uniform_work / report.optimal_work <= 70.6 * 3
    assert 15.4 / 3 <= report.uniform_steps / report.current_work <= 15.4 * 3
    peak = int(np.argmax(estimate.per_interval_density))
    assert grid[peak] < 0.1


@pytest.mark.slow
def test_relative_error_does_not_grow_with_gamma():
    rows = work_comparison_experiment(1, [1e2, 1e4, 1e6], 1 / 16, StopRule.fixed(2_000, seed=71),
                                      ssa_paths=2)
    assert [row.work_tl for row in rows] == [16.0, 16.0, 16.0]
    for first, second in zip(rows, rows[1:]):
        spread = 3 * math.hypot(first.relative_error_se, second.relative_error_se)
        assert abs(first.relative_error - second.relative_error) <= spread
