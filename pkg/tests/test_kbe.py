import math

import numpy as np
import pytest

from kinetics.errors import ConfigurationError, ModelValidationError, SolverError
from kinetics.kbe import (DENSE_PREFIX, Lattice, ValueFunction, build_lattice, discrete_difference,
                          generator_matrix, load_value_function, query_value, save_value_function,
                          solve_backward, true_dual_difference)
from kinetics.model import Observable, Reaction, ReactionNetwork, evaluate_observable
from kinetics.sampling import RngStream
from kinetics.simulate import ssa_path


@pytest.fixture
def decay_solution(decay1):
    net, obs = decay1
    lattice = build_lattice(net, 'full')
    return solve_backward(net, lattice, [0.0, 0.5], observable=obs)


class TestLattice:
    def test_full_size(self, decay1):
        net, _ = decay1
        lattice = build_lattice(net, 'full')
        assert lattice.size == 11
        assert lattice.points()[:, 0].tolist() == list(range(11))

    def test_log_nodes(self):
        net = ReactionNetwork(['X'], [Reaction([-1], 1.0)], [1_000_000], 1.0, [1.0], [1_000_000])
        lattice = build_lattice(net, 'log', log_points_per_dim=60)
        nodes = lattice.nodes[0]
        assert lattice.size <= 76
        assert nodes[:DENSE_PREFIX].tolist() == list(range(16))
        assert nodes[-1] == 1_000_000
        assert np.all(np.diff(nodes) > 0)

    def test_full_cap(self, dimer):
        net, _ = dimer
        with pytest.raises(ConfigurationError):
            build_lattice(net, 'full')

    def test_unknown_mode(self, decay1):
        net, _ = decay1
        with pytest.raises(ConfigurationError):
            build_lattice(net, 'sparse')

    def test_rejects_unsorted_nodes(self):
        with pytest.raises(ConfigurationError):
            Lattice([np.array([0, 2, 1])], 'full')

    def test_generator_rows_sum_to_zero_inside(self, decay1):
        net, _ = decay1
        A = generator_matrix(net, build_lattice(net, 'full'))
        assert np.allclose(np.asarray(A.sum(axis=1)).ravel(), 0.0)
        assert A[10, 9] == pytest.approx(2.0)
        assert A[10, 10] == pytest.approx(-2.0)
        assert A[0].nnz == 0


class TestSolveBackward:
    def test_decay_first_moment(self, decay_solution):
        assert query_value(decay_solution, [10], 0.0) == pytest.approx(10 * math.exp(-0.2), abs=1e-6)
        assert query_value(decay_solution, [10], 0.5) == pytest.approx(10 * math.exp(-0.1), abs=1e-6)

    def test_decay_second_moment(self, decay1):
        net, _ = decay1
        vf = solve_backward(net, build_lattice(net, 'full'), [0.0], observable=Observable.monomial([2]))
        expected = 90 * math.exp(-0.4) + 10 * math.exp(-0.2)
        assert query_value(vf, [10], 0.0) == pytest.approx(expected, abs=1e-5)

    def test_terminal_condition(self, decay_solution):
        for x in range(11):
            assert query_value(decay_solution, [x], 1.0) == x

    def test_constant_observable_stays_constant(self, decay1):
        net, _ = decay1
        vf = solve_backward(net, build_lattice(net, 'full'), [0.0], observable=Observable([(3.0, [0])]))
        assert np.allclose(vf.values, 3.0)

    def test_snapshot_times_descend_and_include_final_time(self, decay_solution):
        assert decay_solution.snapshot_times.tolist() == [1.0, 0.5, 0.0]

    def test_linear_in_observable(self, decay1):
        net, _ = decay1
        lattice = build_lattice(net, 'full')
        first = solve_backward(net, lattice, [0.0], observable=Observable.monomial([1]))
        second = solve_backward(net, lattice, [0.0], observable=Observable.monomial([2]))
        both = solve_backward(net, lattice, [0.0], observable=Observable([(2.0, [1]), (1.0, [2])]))
        assert np.allclose(both.values[-1], 2 * first.values[-1] + second.values[-1], atol=1e-5)

    def test_two_species_conversion(self):
        # A -> B: B_T ~ Binomial(5, 1 - e^{-1})
        net = ReactionNetwork(['A', 'B'], [Reaction([-1, 1], 1.0)], [5, 0], 1.0, [1.0, 1.0], [5, 5])
        vf = solve_backward(net, build_lattice(net, 'full'), [0.0], observable=Observable.monomial([0, 1]))
        assert query_value(vf, [5, 0], 0.0) == pytest.approx(5 * (1 - math.exp(-1.0)), abs=1e-6)
        assert query_value(vf, [2, 3], 0.0) == pytest.approx(3 + 2 * (1 - math.exp(-1.0)), abs=1e-6)

    def test_zero_reaction_network(self):
        net = ReactionNetwork(['X'], [], [3], 1.0, [1.0], [3])
        vf = solve_backward(net, build_lattice(net, 'full'), [0.0], observable=Observable.monomial([1]))
        assert query_value(vf, [2], 0.0) == 2.0

    def test_rejects_invalid_network(self):
        net = ReactionNetwork(['X'], [Reaction([1], 1.0, [1])], [3], 1.0, [1.0], [10])
        with pytest.raises(ModelValidationError):
            solve_backward(net, build_lattice(net, 'full'), [0.0])

    def test_snapshot_outside_interval(self, decay1):
        net, _ = decay1
        with pytest.raises(ConfigurationError):
            solve_backward(net, build_lattice(net, 'full'), [1.5])

    def test_inner_step_limit(self, decay1):
        net, _ = decay1
        with pytest.raises(SolverError):
            solve_backward(net, build_lattice(net, 'full'), [0.0], max_steps=1)

    def test_log_lattice_off_grid_accuracy(self):
        net = ReactionNetwork(['X'], [Reaction([-1], 1.0)], [1_000_000], 1.0, [1.0], [1_000_000])
        vf = solve_backward(net, build_lattice(net, 'log'), [0.0], observable=Observable.monomial([1]))
        nodes = vf.lattice.nodes[0]
        gaps = np.nonzero(np.diff(nodes) >= 2)[0]
        assert gaps.size > 10
        for k in gaps[::5]:
            x = int(nodes[k] + nodes[k + 1]) // 2
            exact = x * math.exp(-1.0)
            assert abs(query_value(vf, [x], 0.0) - exact) <= 1e-3 * exact

    def test_maximum_principle_decay(self, decay1):
        net, _ = decay1
        vf = solve_backward(net, build_lattice(net, 'full'), [0.0, 0.5], observable=Observable.monomial([2]))
        slack = 1e-6 * 100
        assert vf.values.min() >= -slack
        assert vf.values.max() <= 100 + slack

    def test_maximum_principle_dimer(self, dimer):
        net, _ = dimer
        small = ReactionNetwork(net.species_names, net.reactions, [20, 0, 0], 1.0,
                                net.conservation_vector, [20, 10, 10])
        obs = Observable([(1.0, [2, 0, 0]), (1.0, [0, 0, 1])])
        vf = solve_backward(small, build_lattice(small, 'full'), [0.0, 0.5], observable=obs)
        g = vf.values[0]
        slack = 1e-6 * g.max()
        assert vf.values.min() >= g.min() - slack
        assert vf.values.max() <= g.max() + slack

    @pytest.mark.parametrize('fixture', ['decay1', 'dimer'])
    def test_restart_from_midpoint_snapshot(self, fixture, request):
        net, _ = request.getfixturevalue(fixture)
        if net.d > 1:
            net = ReactionNetwork(net.species_names, net.reactions, [12, 0, 0], 1.0,
                                  net.conservation_vector, [12, 6, 6])
        obs = Observable([(1.0, [2] + [0] * (net.d - 1))])
        lattice = build_lattice(net, 'full')
        direct = solve_backward(net, lattice, [0.0], observable=obs)
        upper = solve_backward(net, lattice, [0.5], observable=obs)
        lower = solve_backward(net, lattice, [0.0], observable=obs, terminal=upper.values[-1], final_time=0.5)
        scale = max(1.0, float(np.abs(direct.values).max()))
        assert np.max(np.abs(lower.values[-1] - direct.values[-1])) <= 10 * direct.tol * scale
        for x in lattice.points()[::7]:
            assert lower.value_at(x, 0.0) == pytest.approx(direct.value_at(x, 0.0), abs=10 * direct.tol * scale)

    def test_terminal_shape_checked(self, decay1):
        net, _ = decay1
        with pytest.raises(ConfigurationError):
            solve_backward(net, build_lattice(net, 'full'), [0.0], terminal=np.zeros(3), final_time=0.5)

    @pytest.mark.slow
    def test_matches_ssa_mean(self):
        # reversible dimerization with decay on a 91-state box
        net = ReactionNetwork(['X1', 'X2'], [Reaction([-1, 0], 0.3), Reaction([-2, 1], 0.05),
                                             Reaction([2, -1], 0.5)],
                              [12, 0], 1.0, [1.0, 2.0], [12, 6])
        obs = Observable([(1.0, [1, 0]), (1.0, [0, 2])])
        vf = solve_backward(net, build_lattice(net, 'full'), [0.0], observable=obs)
        assert vf.lattice.size <= 200
        for start in ([12, 0], [6, 3], [3, 2]):
            finals = [ssa_path(net, start, 1.0, RngStream(47, i), record_path=False).final_state
                      for i in range(4_000)]
            samples = np.array([evaluate_observable(obs, x) for x in finals])
            se = samples.std(ddof=1) / math.sqrt(samples.size)
            assert abs(samples.mean() - query_value(vf, start, 0.0)) < 3 * se


class TestQueries:
    def test_on_node_query_is_exact(self, decay_solution):
        k = decay_solution.snapshot_index(0.5)
        assert query_value(decay_solution, [7], 0.5) == decay_solution.values[k][7]

    def test_missing_snapshot(self, decay_solution):
        with pytest.raises(ConfigurationError):
            query_value(decay_solution, [7], 0.3)

    def test_clamped_flag(self, decay_solution):
        value, clamped = query_value(decay_solution, [12], 0.0, return_clamped=True)
        assert clamped
        assert value == query_value(decay_solution, [10], 0.0)
        assert not query_value(decay_solution, [4], 0.0, return_clamped=True)[1]

    def test_dimension_mismatch(self, decay_solution):
        with pytest.raises(ConfigurationError):
            query_value(decay_solution, [4, 1], 0.0)

    def test_discrete_difference(self, decay_solution):
        assert discrete_difference(decay_solution, [6], 0.0, 0) == pytest.approx(-math.exp(-0.2), abs=1e-6)
        _, clamped = discrete_difference(decay_solution, [0], 0.0, 0, return_clamped=True)
        assert clamped

    def test_value_at_interpolates_in_time(self, decay_solution):
        mid = decay_solution.value_at([10], 0.25)
        ends = (query_value(decay_solution, [10], 0.0), query_value(decay_solution, [10], 0.5))
        assert mid == pytest.approx(0.5 * sum(ends))
        with pytest.raises(ConfigurationError):
            decay_solution.value_at([10], 1.5)

    def test_true_dual_difference_off_snapshot(self, decay_solution):
        value = true_dual_difference(decay_solution, [6], 0.25, 0)
        assert -math.exp(-0.1) - 1e-6 <= value <= -math.exp(-0.2) + 1e-6
        assert true_dual_difference(decay_solution, [6], 0.5, 0) == pytest.approx(
            discrete_difference(decay_solution, [6], 0.5, 0))

    def test_snapshot_times_must_decrease(self, decay_solution):
        with pytest.raises(ConfigurationError):
            ValueFunction(decay_solution.lattice, [0.0, 1.0], decay_solution.values[:2],
                          decay_solution.observable, decay_solution.stoichiometry)


class TestArchive:
    def test_round_trip(self, decay_solution, tmp_path):
        path = tmp_path / 'decay.npz'
        save_value_function(path, decay_solution)
        loaded = load_value_function(path)
        assert np.array_equal(loaded.values, decay_solution.values)
        assert loaded.snapshot_times.tolist() == decay_solution.snapshot_times.tolist()
        assert loaded.grid_mode == 'full'
        assert loaded.lattice.interpolation == 'linear'
        assert loaded.observable.terms == decay_solution.observable.terms
        assert query_value(loaded, [9], 0.5) == query_value(decay_solution, [9], 0.5)

    def test_unreadable_archive(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_value_function(tmp_path / 'missing.npz')
        broken = tmp_path / 'broken.npz'
        broken.write_bytes(b'not an archive')
        with pytest.raises(ConfigurationError):
            load_value_function(broken)
