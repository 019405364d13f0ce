"""
Path generation: exact SSA, plain tau-leap, leap-size selection, the
Poisson-bridge tau-leap and coupled half-step refinements.

Each reaction channel j is driven by a unit-rate Poisson process Y_j run
on its internal time lambda_j = int a_j(X_s) ds. The bridge method keeps
the sampled (lambda, Y) pairs of every channel in a ChannelHistory.
Whenever a tentative step produces a negative population the physical
step is halved and the already sampled increment is split with a
binomial bridge, so the law of the driving processes never changes.
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import register_method
from .base_method import PathMethod
from .errors import ArgumentError, BridgeError, ConfigurationError
from .model import ReactionNetwork, propensity_gradients, propensity_vector
from .sampling import (RngStream, sample_binomial, sample_categorical, sample_exponential,
                       sample_poisson)


logger = logging.getLogger('kinetics')

MAX_HALVING_DEPTH = 64
LANDING_TOLERANCE = 1e-12


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    increments: np.ndarray
    halved: np.ndarray
    base_index: np.ndarray
    grid: np.ndarray
    n_halvings: int = 0
    n_jumps: Optional[int] = None

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def taus(self) -> np.ndarray:
        return np.diff(self.times)

    def has_negative_state(self) -> bool:
        return bool(np.any(self.states < 0))

    def is_consistent(self, stoichiometry: np.ndarray) -> bool:
        """states[n+1] == states[n] + sum_j nu_j dY_j at every step."""
        if self.n_steps == 0:
            return True
        jumps = self.increments @ stoichiometry
        return bool(np.array_equal(np.diff(self.states, axis=0), jumps))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_steps': self.n_steps,
            'n_halvings': self.n_halvings,
            'n_jumps': self.n_jumps,
            't_final': float(self.times[-1]),
            'final_state': self.final_state.tolist(),
        }


class ChannelHistory:
    """Per-channel sorted (lambda, Y) samples of the driving Poisson processes."""

    def __init__(self, n_channels: int):
        self.lam: List[List[float]] = [[0.0] for _ in range(n_channels)]
        self.counts: List[List[int]] = [[0] for _ in range(n_channels)]
        self.cursor: List[int] = [0] * n_channels

    @property
    def n_channels(self) -> int:
        return len(self.lam)

    def at_frontier(self, j: int) -> bool:
        return self.cursor[j] == len(self.lam[j]) - 1

    def position(self, j: int) -> Tuple[float, int]:
        k = self.cursor[j]
        return self.lam[j][k], self.counts[j][k]

    def next_node(self, j: int) -> Tuple[float, int]:
        k = self.cursor[j] + 1
        return self.lam[j][k], self.counts[j][k]

    def insert_after_cursor(self, j: int, lam: float, count: int):
        k = self.cursor[j] + 1
        self.lam[j].insert(k, lam)
        self.counts[j].insert(k, count)

    def rewound(self) -> 'ChannelHistory':
        """Copy with every cursor back at internal time zero."""
        copy = ChannelHistory(0)
        copy.lam = [list(ls) for ls in self.lam]
        copy.counts = [list(cs) for cs in self.counts]
        copy.cursor = [0] * self.n_channels
        return copy

    def is_consistent(self) -> bool:
        for lam, counts in zip(self.lam, self.counts):
            if lam[0] != 0.0 or counts[0] != 0:
                return False
            if any(b <= a for a, b in zip(lam, lam[1:])):
                return False
            if any(b < a for a, b in zip(counts, counts[1:])):
                return False
        return True

    def __len__(self):
        return sum(len(ls) for ls in self.lam)


@dataclass
class LeapControl:
    epsilon: float = 0.05
    tau_max: float = math.inf
    mode: str = 'fixed'  # 'fixed' | 'pre-leap'

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ArgumentError(f"leap control epsilon must lie in (0, 1), got {self.epsilon}")
        if not self.tau_max > 0:
            raise ArgumentError(f"tau_max must be positive, got {self.tau_max}")
        if self.mode not in ('fixed', 'pre-leap'):
            raise ArgumentError(f"unknown leap mode '{self.mode}'")


def uniform_grid(final_time: float, tau: float) -> np.ndarray:
    steps = final_time / tau
    n_steps = int(round(steps))
    if n_steps < 1 or abs(steps - n_steps) > 1e-9 * max(1.0, steps):
        raise ConfigurationError(f"tau={tau} does not divide T={final_time} into an integer number of steps")
    return np.linspace(0.0, final_time, n_steps + 1)


def refine_grid(grid: Sequence[float], factor: int = 2) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    pieces = [np.linspace(a, b, factor + 1)[:-1] for a, b in zip(grid[:-1], grid[1:])]
    return np.concatenate(pieces + [grid[-1:]])


def _check_grid(grid, final_time: float) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ConfigurationError("base grid needs at least two time points")
    if grid[0] != 0.0:
        raise ConfigurationError(f"base grid must start at 0, starts at {grid[0]}")
    if np.any(np.diff(grid) <= 0):
        raise ConfigurationError("base grid must be strictly increasing")
    if abs(grid[-1] - final_time) > 1e-12 * max(1.0, final_time):
        raise ConfigurationError(f"base grid ends at {grid[-1]}, model final time is {final_time}")
    return grid


def select_leap_size(net: ReactionNetwork, state, control: LeapControl) -> float:
    """Pre-leap step from the mean/variance approximation of the propensity change."""
    a = propensity_vector(net, state)
    a0 = a.sum()
    if a0 <= 0:
        raise ArgumentError("leap size requested in an absorbed state (a0 = 0)")
    # projected[j, i] = grad a_j . nu_i
    projected = propensity_gradients(net, state) @ net.stoichiometry.T
    mu = projected @ a
    sigma2 = (projected ** 2) @ a
    tau = control.tau_max
    eps = control.epsilon
    for j in range(net.M):
        if mu[j] != 0.0:
            tau = min(tau, eps * a0 / abs(mu[j]))
        if sigma2[j] > 0.0:
            tau = min(tau, eps * eps * a0 * a0 / sigma2[j])
    return float(tau)


def tau_leap_step(net: ReactionNetwork, state, tau: float, rng: RngStream) -> Tuple[np.ndarray, np.ndarray]:
    """One plain tau-leap step; negative populations are not prevented."""
    if not tau > 0:
        raise ArgumentError(f"step size must be positive, got {tau}")
    a = propensity_vector(net, state)
    increments = np.array([sample_poisson(a[j] * tau, rng) for j in range(net.M)], dtype=np.int64)
    new_state = np.asarray(state, dtype=np.int64) + increments @ net.stoichiometry
    return new_state, increments


def ssa_path(net: ReactionNetwork, x0, final_time: float, rng: RngStream,
             record_path: bool = True) -> Trajectory:
    """Exact jump-process realization (Gillespie's direct method).

    With record_path False only the terminal state and the jump count are kept.
    """
    x = np.array(x0, dtype=np.int64)
    t = 0.0
    times = [0.0]
    states = [x.copy()]
    channels = []
    totals = np.zeros(net.M, dtype=np.int64)
    n_jumps = 0
    stoich = net.stoichiometry
    while True:
        a = propensity_vector(net, x)
        a0 = a.sum()
        if a0 <= 0:
            break
        t += sample_exponential(a0, rng)
        if t > final_time:
            break
        j = sample_categorical(a, rng)
        x += stoich[j]
        n_jumps += 1
        if record_path:
            times.append(t)
            states.append(x.copy())
            channels.append(j)
        else:
            totals[j] += 1

    if record_path:
        times.append(final_time)
        states.append(x.copy())
        increments = np.zeros((len(channels) + 1, net.M), dtype=np.int64)
        for row, j in enumerate(channels):
            increments[row, j] = 1
    else:
        times.append(final_time)
        states.append(x.copy())
        increments = totals[np.newaxis, :]
    n_rows = increments.shape[0]
    return Trajectory(
        times=np.array(times),
        states=np.array(states, dtype=np.int64),
        increments=increments,
        halved=np.zeros(n_rows, dtype=bool),
        base_index=np.zeros(n_rows, dtype=np.int64),
        grid=np.array([0.0, final_time]),
        n_jumps=n_jumps,
    )


def plain_tau_leap_path(net: ReactionNetwork, x0, grid, rng: RngStream) -> Trajectory:
    grid = _check_grid(grid, net.final_time)
    x = np.array(x0, dtype=np.int64)
    states = [x.copy()]
    increments = []
    for tau in np.diff(grid):
        x, dy = tau_leap_step(net, x, tau, rng)
        states.append(x.copy())
        increments.append(dy)
    n_steps = grid.size - 1
    return Trajectory(
        times=grid.copy(),
        states=np.array(states, dtype=np.int64),
        increments=np.array(increments, dtype=np.int64).reshape(n_steps, net.M),
        halved=np.zeros(n_steps, dtype=bool),
        base_index=np.arange(n_steps),
        grid=grid.copy(),
    )


class _BridgeRunner:
    """Poisson-bridge tau-leap along a base grid, sharing a ChannelHistory."""

    def __init__(self, net: ReactionNetwork, rng: RngStream, history: ChannelHistory,
                 control: Optional[LeapControl] = None, max_halvings: int = MAX_HALVING_DEPTH):
        self.net = net
        self.rng = rng
        self.history = history
        self.control = control if control is not None and control.mode == 'pre-leap' else None
        self.max_halvings = max_halvings

    def _step_size(self, x, a, remaining: float, cap: float) -> Tuple[float, bool]:
        tau = min(remaining, cap)
        if self.control is not None and a.sum() > 0:
            tau = min(tau, select_leap_size(self.net, x, self.control))
        # land on the nearest stored node among channels with history to the right
        history = self.history
        landing = math.inf
        for j in range(self.net.M):
            if a[j] > 0 and not history.at_frontier(j):
                lam_k, _ = history.position(j)
                lam_next, _ = history.next_node(j)
                landing = min(landing, (lam_next - lam_k) / a[j])
        if landing <= tau * (1.0 + LANDING_TOLERANCE):
            return landing, True
        return tau, False

    def _sample_increments(self, a, tau: float, step: int, t: float, x) -> Tuple[np.ndarray, List[int]]:
        """Increments for every channel; inserts new nodes and returns the target node index."""
        history = self.history
        increments = np.zeros(self.net.M, dtype=np.int64)
        targets = list(history.cursor)
        for j in range(self.net.M):
            if a[j] <= 0:
                continue
            lam_k, y_k = history.position(j)
            dlam = a[j] * tau
            if lam_k + dlam == lam_k:
                # below the resolution of lambda: no firing, no new node
                continue
            if history.at_frontier(j):
                lam_new = lam_k + dlam
                dy = sample_poisson(dlam, self.rng)
                history.insert_after_cursor(j, lam_new, y_k + dy)
            else:
                lam_next, y_next = history.next_node(j)
                gap = lam_next - lam_k
                if gap <= 0:
                    raise BridgeError("zero-length internal-time interval", x.tolist(), step, t)
                if dlam >= gap * (1.0 - LANDING_TOLERANCE):
                    dy = y_next - y_k
                else:
                    lam_new = lam_k + dlam
                    if not lam_k < lam_new < lam_next:
                        raise BridgeError("bridge target outside the stored interval", x.tolist(), step, t)
                    dy = sample_binomial(y_next - y_k, dlam / gap, self.rng)
                    history.insert_after_cursor(j, lam_new, y_k + dy)
            increments[j] = dy
            targets[j] = history.cursor[j] + 1
        return increments, targets

    def run(self, x0, grid) -> Trajectory:
        grid = _check_grid(grid, self.net.final_time)
        stoich = self.net.stoichiometry
        history = self.history
        x = np.array(x0, dtype=np.int64)
        times = [0.0]
        states = [x.copy()]
        increments_rows = []
        halved_rows = []
        base_rows = []
        n_halvings = 0

        for n in range(grid.size - 1):
            t = float(grid[n])
            t_end = float(grid[n + 1])
            cap = math.inf
            depth = 0
            while t < t_end:
                remaining = t_end - t
                if remaining <= np.spacing(t_end):
                    t = t_end
                    break
                a = propensity_vector(self.net, x)
                tau, _ = self._step_size(x, a, remaining, cap)
                increments, targets = self._sample_increments(a, tau, len(increments_rows), t, x)
                candidate = x + increments @ stoich
                if np.any(candidate < 0):
                    depth += 1
                    n_halvings += 1
                    if depth > self.max_halvings:
                        logger.warning(f"[SIM] bridge gave up at t={t:g} in state {x.tolist()} "
                                       f"after {depth - 1} halvings")
                        raise BridgeError(f"halving depth exceeded {self.max_halvings}",
                                          x.tolist(), len(increments_rows), t)
                    cap = tau / 2.0
                    continue

                history.cursor = targets
                x = candidate
                if tau >= remaining * (1.0 - LANDING_TOLERANCE) or t_end - (t + tau) <= np.spacing(t_end):
                    t = t_end
                else:
                    t = t + tau
                times.append(t)
                states.append(x.copy())
                increments_rows.append(increments)
                halved_rows.append(depth > 0)
                base_rows.append(n)
                cap = math.inf
                depth = 0

        n_steps = len(increments_rows)
        return Trajectory(
            times=np.array(times),
            states=np.array(states, dtype=np.int64),
            increments=np.array(increments_rows, dtype=np.int64).reshape(n_steps, self.net.M),
            halved=np.array(halved_rows, dtype=bool),
            base_index=np.array(base_rows, dtype=np.int64),
            grid=grid.copy(),
            n_halvings=n_halvings,
        )


def bridge_tau_leap_path(net: ReactionNetwork, x0, base_grid, rng: RngStream,
                         control: Optional[LeapControl] = None,
                         history: Optional[ChannelHistory] = None,
                         max_halvings: int = MAX_HALVING_DEPTH) -> Tuple[Trajectory, ChannelHistory]:
    """Poisson-bridge tau-leap path; all sampled states are nonnegative."""
    if history is None:
        history = ChannelHistory(net.M)
    runner = _BridgeRunner(net, rng, history, control, max_halvings)
    trajectory = runner.run(x0, base_grid)
    return trajectory, history


def coupled_refined_path(net: ReactionNetwork, coarse: Tuple[Trajectory, ChannelHistory],
                         rng: RngStream, factor: int = 2) -> Trajectory:
    """Half-step path driven by the same (lambda, Y) samples as the coarse path.

    Internal times beyond the stored history are extended with fresh samples.
    """
    coarse_path, coarse_history = coarse
    fine_grid = refine_grid(coarse_path.grid, factor)
    fine, _ = bridge_tau_leap_path(net, coarse_path.states[0], fine_grid, rng,
                                   history=coarse_history.rewound())
    return fine


# registered path methods

class SSAMethod(PathMethod):

    @property
    def name(self) -> str:
        return 'ssa'

    @property
    def display_name(self) -> str:
        return 'Stochastic simulation algorithm'

    @property
    def description(self) -> str:
        return 'Exact jump-by-jump realization with exponential waiting times.'

    def simulate(self, net, rng, grid=None, control=None) -> Trajectory:
        return ssa_path(net, net.initial_state, net.final_time, rng, record_path=False)


class TauLeapMethod(PathMethod):

    @property
    def name(self) -> str:
        return 'tauleap'

    @property
    def display_name(self) -> str:
        return 'Plain tau-leap'

    @property
    def description(self) -> str:
        return 'Poisson increments with frozen propensities; populations may become negative.'

    @property
    def needs_grid(self) -> bool:
        return True

    def simulate(self, net, rng, grid=None, control=None) -> Trajectory:
        return plain_tau_leap_path(net, net.initial_state, grid, rng)


class BridgeTauLeapMethod(PathMethod):

    @property
    def name(self) -> str:
        return 'bridge'

    @property
    def display_name(self) -> str:
        return 'Poisson-bridge tau-leap'

    @property
    def description(self) -> str:
        return 'Tau-leap with post-leap halving by binomial bridges; never negative.'

    @property
    def needs_grid(self) -> bool:
        return True

    def simulate(self, net, rng, grid=None, control=None) -> Trajectory:
        trajectory, _ = bridge_tau_leap_path(net, net.initial_state, grid, rng, control)
        return trajectory


register_method(SSAMethod)
register_method(TauLeapMethod)
register_method(BridgeTauLeapMethod)
