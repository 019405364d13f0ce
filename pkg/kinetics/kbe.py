"""
Backward Kolmogorov equation on a bounded lattice.

The value function u(x, t) = E[g(X_T) | X_t = x] solves the linear system
du/dt = -A u with u(., T) = g, where

    (A u)(x) = sum_j a_j(x) (u(x + nu_j) - u(x)).

The full lattice enumerates the whole box [0, x_max]. The logarithmic
lattice keeps 0..15 and log-spaced integers above; shifted points that
fall between nodes are interpolated multilinearly, either in x (default,
exact for value functions linear in x) or in s = log(1 + x). A stays a
sparse constant matrix in both modes.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as sparse_linalg

from shared.debug_utils import debug_function

from .errors import ConfigurationError, SolverError
from .model import Observable, ReactionNetwork, evaluate_observable, validate_network

logger = logging.getLogger('kinetics')

FULL_LATTICE_CAP = 5_000_000
DENSE_PREFIX = 16
DEFAULT_LOG_POINTS = 60
DEFAULT_TOL = {'full': 1e-8, 'log': 1e-6}
MAX_INNER_STEPS = 1_000_000
_FACTOR_CACHE_SIZE = 32
INTERPOLATIONS = ('linear', 'log')


@dataclass
class Lattice:
    nodes: List[np.ndarray]
    mode: str
    interpolation: str = 'linear'  # 'linear' in x | 'log' in s = log(1 + x)

    def __post_init__(self):
        if self.interpolation not in INTERPOLATIONS:
            raise ConfigurationError(f"unknown interpolation '{self.interpolation}' (expected {INTERPOLATIONS})")
        self.nodes = [np.asarray(n, dtype=np.int64) for n in self.nodes]
        for i, n in enumerate(self.nodes):
            if n.size == 0 or n[0] != 0 or np.any(np.diff(n) <= 0):
                raise ConfigurationError(f"lattice nodes of dimension {i} must start at 0 and increase")

    @property
    def d(self) -> int:
        return len(self.nodes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(n.size for n in self.nodes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def upper(self) -> np.ndarray:
        return np.array([n[-1] for n in self.nodes], dtype=np.int64)

    def points(self) -> np.ndarray:
        """All nodes as an (S, d) integer array in flattened order."""
        grids = np.meshgrid(*self.nodes, indexing='ij')
        return np.stack(grids, axis=-1).reshape(-1, self.d)

    def flat_index(self, multi_index) -> np.ndarray:
        return np.ravel_multi_index(tuple(multi_index), self.shape)

    def to_dict(self) -> Dict[str, Any]:
        return {'mode': self.mode, 'interpolation': self.interpolation,
                'shape': list(self.shape), 'size': self.size}


def _bracket(nodes: np.ndarray, y: np.ndarray, interpolation: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bracketing node indices and the weight of the upper node."""
    y = np.clip(np.asarray(y, dtype=float), nodes[0], nodes[-1])
    hi = np.clip(np.searchsorted(nodes, y, side='left'), 0, nodes.size - 1)
    exact = nodes[hi] == y
    lo = np.where(exact, hi, hi - 1)
    coordinate = np.log1p if interpolation == 'log' else np.asarray
    s_lo = coordinate(nodes[lo].astype(float))
    span = coordinate(nodes[hi].astype(float)) - s_lo
    w = np.where(exact, 0.0, (coordinate(y) - s_lo) / np.where(span > 0, span, 1.0))
    return lo, hi, w


def _corner_weights(lattice: Lattice, targets: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(flat node index, weight) arrays for each corner of the enclosing lattice cell."""
    brackets = [_bracket(lattice.nodes[i], targets[:, i], lattice.interpolation) for i in range(lattice.d)]
    corners = []
    for bits in itertools.product((0, 1), repeat=lattice.d):
        index = []
        weight = np.ones(targets.shape[0])
        for bit, (lo, hi, w) in zip(bits, brackets):
            index.append(hi if bit else lo)
            weight = weight * (w if bit else 1.0 - w)
        corners.append((lattice.flat_index(index), weight))
    return corners


@dataclass
class ValueFunction:
    lattice: Lattice
    snapshot_times: np.ndarray
    values: np.ndarray
    observable: Observable
    stoichiometry: np.ndarray
    tol: float = 0.0
    inner_steps: int = 0

    def __post_init__(self):
        self.snapshot_times = np.asarray(self.snapshot_times, dtype=float)
        if np.any(np.diff(self.snapshot_times) >= 0):
            raise ConfigurationError("snapshot times must be strictly decreasing")
        if self.values.shape != (self.snapshot_times.size, self.lattice.size):
            raise ConfigurationError(f"values have shape {self.values.shape}, expected "
                                     f"({self.snapshot_times.size}, {self.lattice.size})")

    @property
    def grid_mode(self) -> str:
        return self.lattice.mode

    @property
    def final_time(self) -> float:
        return float(self.snapshot_times[0])

    def snapshot_index(self, t: float) -> int:
        scale = max(1.0, abs(self.final_time))
        hits = np.nonzero(np.abs(self.snapshot_times - t) <= 1e-12 * scale)[0]
        if hits.size == 0:
            raise ConfigurationError(f"t={t} is not a stored snapshot time")
        return int(hits[0])

    def has_snapshot(self, t: float) -> bool:
        scale = max(1.0, abs(self.final_time))
        return bool(np.any(np.abs(self.snapshot_times - t) <= 1e-12 * scale))

    def query(self, x, k: int) -> Tuple[float, bool]:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        if x.shape[1] != self.lattice.d:
            raise ConfigurationError(f"state has {x.shape[1]} components, lattice has {self.lattice.d}")
        clamped = bool(np.any(x < 0) or np.any(x > self.lattice.upper))
        x = np.clip(x, 0, self.lattice.upper)
        row = self.values[k]
        total = 0.0
        for flat, weight in _corner_weights(self.lattice, x):
            if weight[0] != 0.0:
                total += weight[0] * row[flat[0]]
        return float(total), clamped

    def value_at(self, x, t: float) -> float:
        """u(x, t) with linear interpolation in time between bracketing snapshots."""
        if self.has_snapshot(t):
            return self.query(x, self.snapshot_index(t))[0]
        times = self.snapshot_times
        if t > times[0] or t < times[-1]:
            raise ConfigurationError(f"t={t} outside the solved interval [{times[-1]}, {times[0]}]")
        # times are decreasing: k is the snapshot just above t
        k = int(np.nonzero(times > t)[0][-1])
        t_hi, t_lo = times[k], times[k + 1]
        theta = (t - t_lo) / (t_hi - t_lo)
        return theta * self.query(x, k)[0] + (1.0 - theta) * self.query(x, k + 1)[0]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'lattice': self.lattice.to_dict(),
            'snapshots': self.snapshot_times.size,
            'tol': self.tol,
            'inner_steps': self.inner_steps,
        }


def _log_nodes(x_max: int, points: int) -> np.ndarray:
    dense = np.arange(0, min(DENSE_PREFIX - 1, x_max) + 1)
    if x_max < DENSE_PREFIX:
        return dense
    s = np.linspace(math.log1p(DENSE_PREFIX), math.log1p(x_max), max(points, 2))
    spread = np.rint(np.expm1(s)).astype(np.int64)
    return np.unique(np.concatenate([dense, spread, [x_max]]))


@debug_function
def build_lattice(net: ReactionNetwork, mode: str = 'full', log_points_per_dim: int = DEFAULT_LOG_POINTS,
                  max_states: int = FULL_LATTICE_CAP, interpolation: str = 'linear') -> Lattice:
    bounds = [int(b) for b in net.state_bounds]
    if mode == 'full':
        count = math.prod(b + 1 for b in bounds)
        if count > max_states:
            raise ConfigurationError(f"full lattice has {count} states (cap {max_states}); "
                                     f"use logarithmic mode")
        lattice = Lattice([np.arange(b + 1) for b in bounds], 'full')
    elif mode == 'log':
        lattice = Lattice([_log_nodes(b, log_points_per_dim) for b in bounds], 'log', interpolation)
    else:
        raise ConfigurationError(f"unknown lattice mode '{mode}' (expected full or log)")
    logger.info(f"[KBE] {lattice.mode} lattice with {lattice.size} nodes, shape {lattice.shape}")
    return lattice


def _lattice_propensities(net: ReactionNetwork, points: np.ndarray) -> np.ndarray:
    # on nonnegative integers the falling factorial vanishes below its order
    x = points.astype(float)
    rates = np.empty((points.shape[0], net.M))
    for j, reaction in enumerate(net.reactions):
        value = np.full(points.shape[0], reaction.rate_constant)
        for i, order in reaction.factors:
            for k in range(order):
                value *= (x[:, i] - k)
        rates[:, j] = value
    return rates


def generator_matrix(net: ReactionNetwork, lattice: Lattice) -> sparse.csr_matrix:
    """Sparse A with jumps leaving the box removed."""
    points = lattice.points()
    n_states = points.shape[0]
    rates = _lattice_propensities(net, points)
    upper = lattice.upper
    rows, cols, vals = [], [], []
    for j in range(net.M):
        targets = points + net.stoichiometry[j]
        active = (rates[:, j] > 0) & np.all(targets >= 0, axis=1) & np.all(targets <= upper, axis=1)
        source = np.nonzero(active)[0]
        if source.size == 0:
            continue
        a = rates[source, j]
        for flat, weight in _corner_weights(lattice, targets[source]):
            keep = weight != 0.0
            rows.append(source[keep])
            cols.append(flat[keep])
            vals.append(a[keep] * weight[keep])
        rows.append(source)
        cols.append(source)
        vals.append(-a)
    if not rows:
        return sparse.csr_matrix((n_states, n_states))
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n_states, n_states))


class _TrapezoidalStepper:
    """(I - h/2 A) u_new = (I + h/2 A) u with LU factorizations cached by h."""

    def __init__(self, generator: sparse.csr_matrix):
        self.generator = generator.tocsc()
        self.identity = sparse.identity(generator.shape[0], format='csc')
        self._factors: Dict[float, Any] = {}

    def _factor(self, h: float):
        lu = self._factors.get(h)
        if lu is None:
            if len(self._factors) >= _FACTOR_CACHE_SIZE:
                self._factors.clear()
            try:
                lu = sparse_linalg.splu(self.identity - 0.5 * h * self.generator)
            except RuntimeError as e:
                norm = sparse_linalg.norm(self.generator, 1)
                raise SolverError(f"sparse LU failed for h={h:g} (|A|_1={norm:g}, "
                                  f"h|A|_1={h * norm:g}): {e}") from e
            self._factors[h] = lu
        return lu

    def step(self, u: np.ndarray, h: float) -> np.ndarray:
        rhs = u + 0.5 * h * (self.generator @ u)
        out = self._factor(h).solve(rhs)
        if not np.all(np.isfinite(out)):
            raise SolverError(f"non-finite values after a step of size {h:g}")
        return out


@debug_function
def solve_backward(net: ReactionNetwork, lattice: Lattice, snapshot_times: Sequence[float],
                   tol: Optional[float] = None, observable: Optional[Observable] = None,
                   validate: bool = True, max_steps: int = MAX_INNER_STEPS,
                   terminal: Optional[np.ndarray] = None, final_time: Optional[float] = None) -> ValueFunction:
    """Integrate du/dt = -A u backward from u(., T) = g with step-doubling control.

    The local error indicator of each accepted step stays below
    tol * h * max(1, |u|_inf). terminal and final_time restart the solve
    from an earlier snapshot instead of g at the model final time.
    """
    if validate:
        validate_network(net).raise_if_invalid()
    if observable is None:
        observable = Observable.linear([1.0] * net.d)
    if lattice.d != net.d:
        raise ConfigurationError(f"lattice has {lattice.d} dimensions, network has {net.d}")
    if tol is None:
        tol = DEFAULT_TOL[lattice.mode]
    final_time = net.final_time if final_time is None else float(final_time)

    times = np.asarray(snapshot_times, dtype=float)
    if np.any(times < -1e-12) or np.any(times > final_time * (1 + 1e-12)):
        raise ConfigurationError(f"snapshot times must lie in [0, {final_time}]")
    times = np.unique(np.concatenate([np.clip(times, 0.0, final_time), [final_time]]))[::-1]

    points = lattice.points()
    if terminal is None:
        u = np.array([evaluate_observable(observable, p) for p in points])
    else:
        u = np.array(terminal, dtype=float)
        if u.shape != (len(points),):
            raise ConfigurationError(f"terminal data has shape {u.shape}, lattice has {len(points)} points")
    stepper = _TrapezoidalStepper(generator_matrix(net, lattice))
    snapshots = [u.copy()]

    t = final_time
    h = final_time / 32.0
    inner_steps = 0
    snap_tol = 1e-12 * max(1.0, final_time)
    for target in times[1:]:
        while t - target > snap_tol:
            h_try = min(h, t - target)
            coarse = stepper.step(u, h_try)
            half = stepper.step(stepper.step(u, 0.5 * h_try), 0.5 * h_try)
            error = np.max(np.abs(coarse - half)) / 3.0 if u.size else 0.0
            budget = tol * h_try * max(1.0, float(np.max(np.abs(half))) if u.size else 1.0)
            inner_steps += 1
            if inner_steps > max_steps:
                raise SolverError(f"tolerance {tol:g} not reached within {max_steps} inner steps (t={t:g})")
            if error > budget:
                h = 0.5 * h_try
                if h < 1e-14 * final_time:
                    raise SolverError(f"step size underflow at t={t:g}; tolerance {tol:g} unreachable")
                continue
            u = half
            t = target if t - h_try - target <= snap_tol else t - h_try
            h = min(2.0 * h_try, final_time) if error < budget / 8.0 else h_try
        snapshots.append(u.copy())

    logger.info(f"[KBE] solved {len(times)} snapshots with {inner_steps} inner steps (tol {tol:g})")
    return ValueFunction(lattice, times, np.array(snapshots), observable, net.stoichiometry.copy(),
                         tol=tol, inner_steps=inner_steps)


def query_value(vf: ValueFunction, x, t: float, return_clamped: bool = False):
    """u(x, t) at a snapshot time; exact on nodes, multilinear between them."""
    value, clamped = vf.query(x, vf.snapshot_index(t))
    return (value, clamped) if return_clamped else value


def discrete_difference(vf: ValueFunction, x, t: float, j: int, return_clamped: bool = False):
    """u(x + nu_j, t) - u(x, t)."""
    k = vf.snapshot_index(t)
    x = np.asarray(x, dtype=np.int64)
    shifted, clamped_shift = vf.query(x + vf.stoichiometry[j], k)
    base, clamped_base = vf.query(x, k)
    difference = shifted - base
    return (difference, clamped_shift or clamped_base) if return_clamped else difference


def true_dual_difference(vf: ValueFunction, x, t: float, j: int) -> float:
    """Value-function difference used as the dual weight of the true-dual density.

    Off-snapshot times are interpolated in time.
    """
    if vf.has_snapshot(t):
        return discrete_difference(vf, x, t, j)
    x = np.asarray(x, dtype=np.int64)
    return vf.value_at(x + vf.stoichiometry[j], t) - vf.value_at(x, t)


# snapshot archive

def save_value_function(path, vf: ValueFunction):
    arrays = {f"nodes_{i}": n for i, n in enumerate(vf.lattice.nodes)}
    terms = vf.observable.terms
    np.savez_compressed(
        path,
        times=vf.snapshot_times,
        values=vf.values,
        mode=np.array(vf.lattice.mode),
        interpolation=np.array(vf.lattice.interpolation),
        stoichiometry=vf.stoichiometry,
        obs_coeffs=np.array([t.coeff for t in terms]),
        obs_exponents=np.array([t.exponents for t in terms], dtype=np.int64).reshape(len(terms), vf.lattice.d),
        tol=np.array(vf.tol),
        **arrays,
    )
    logger.info(f"[KBE] archive written to {path}")


def load_value_function(path) -> ValueFunction:
    try:
        with np.load(path) as archive:
            d = sum(1 for key in archive.files if key.startswith('nodes_'))
            lattice = Lattice([archive[f"nodes_{i}"] for i in range(d)], str(archive['mode']),
                              str(archive['interpolation']))
            observable = Observable(list(zip(archive['obs_coeffs'].tolist(),
                                             archive['obs_exponents'].tolist())))
            return ValueFunction(lattice, archive['times'], archive['values'], observable,
                                 archive['stoichiometry'], tol=float(archive['tol']))
    except (OSError, KeyError, ValueError) as e:
        if isinstance(e, ConfigurationError):
            raise
        raise ConfigurationError(f"cannot read value-function archive {path}: {e}") from e
