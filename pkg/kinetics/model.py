"""
Reaction-network representation.

A network is a list of mass-action reactions on d species. Each propensity
is a rate constant times a product of per-species falling factorials,
a_j(x) = c_j * prod_i x_i (x_i - 1) ... (x_i - r_ij + 1), which vanishes
whenever some x_i < r_ij. For gradients and real-valued points the raw
polynomial is replaced on its transition cell by a C^2 quintic so that
the extension is nonnegative and monotone on the whole real line.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import yaml
from scipy import stats

from .errors import ConfigurationError, ModelParseError, ModelValidationError


BUNDLED_MODELS_DIR = Path(__file__).parent / 'models'
DEFAULT_STATE_GRAPH_CAP = 100_000


class Reaction:
    """One reaction channel: stoichiometric change, rate constant, reactant orders."""

    def __init__(self, nu: Sequence[int], rate_constant: float,
                 reactant_orders: Optional[Sequence[int]] = None, name: str = ''):
        self.nu = np.asarray(nu, dtype=np.int64)
        if self.nu.ndim != 1:
            raise ConfigurationError(f"stoichiometric vector must be 1-d, got shape {self.nu.shape}")
        if not rate_constant > 0:
            raise ConfigurationError(f"rate constant must be positive, got {rate_constant}")
        self.rate_constant = float(rate_constant)
        if reactant_orders is None:
            # mass action: the consumed amount of each species
            self.reactant_orders = np.maximum(-self.nu, 0)
        else:
            self.reactant_orders = np.asarray(reactant_orders, dtype=np.int64)
            if self.reactant_orders.shape != self.nu.shape:
                raise ConfigurationError(
                    f"reactant orders {self.reactant_orders.tolist()} do not match "
                    f"stoichiometry {self.nu.tolist()}")
            if np.any(self.reactant_orders < 0):
                raise ConfigurationError("reactant orders must be nonnegative")
        self.name = name
        # (species index, order) pairs with a nonzero order
        self._factors = tuple((int(i), int(r)) for i, r in enumerate(self.reactant_orders) if r > 0)

    @property
    def d(self) -> int:
        return int(self.nu.shape[0])

    @property
    def order(self) -> int:
        """Reaction order |p_j|, the sum of reactant orders."""
        return int(self.reactant_orders.sum())

    @property
    def reduced_smoothness(self) -> bool:
        """True when some species enters with order > 2 (clamped extension, not C^2)."""
        return any(r > 2 for _, r in self._factors)

    @property
    def factors(self) -> Tuple[Tuple[int, int], ...]:
        return self._factors

    def to_dict(self) -> Dict[str, Any]:
        data = {'nu': self.nu.tolist(), 'c': self.rate_constant}
        if not np.array_equal(self.reactant_orders, np.maximum(-self.nu, 0)):
            data['orders'] = self.reactant_orders.tolist()
        if self.name:
            data['name'] = self.name
        return data

    def __repr__(self):
        return f"Reaction(nu={self.nu.tolist()}, c={self.rate_constant}, orders={self.reactant_orders.tolist()})"


class ObservableTerm(NamedTuple):
    coeff: float
    exponents: Tuple[int, ...]


class Observable:
    """Polynomial quantity of interest g(x) = sum_k coeff_k prod_i x_i^e_ki."""

    def __init__(self, terms: Sequence[Tuple[float, Sequence[int]]]):
        self.terms = tuple(ObservableTerm(float(c), tuple(int(e) for e in exps)) for c, exps in terms)
        dims = {len(t.exponents) for t in self.terms}
        if len(dims) > 1:
            raise ConfigurationError(f"observable terms have inconsistent dimensions {sorted(dims)}")
        if any(e < 0 for t in self.terms for e in t.exponents):
            raise ConfigurationError("observable exponents must be nonnegative")
        self.d = dims.pop() if dims else 0

    @classmethod
    def monomial(cls, exponents: Sequence[int], coeff: float = 1.0) -> 'Observable':
        return cls([(coeff, exponents)])

    @classmethod
    def linear(cls, weights: Sequence[float]) -> 'Observable':
        d = len(weights)
        terms = []
        for i, w in enumerate(weights):
            exps = [0] * d
            exps[i] = 1
            terms.append((w, exps))
        return cls(terms)

    def _collected(self) -> Dict[Tuple[int, ...], float]:
        coeffs: Dict[Tuple[int, ...], float] = {}
        for t in self.terms:
            coeffs[t.exponents] = coeffs.get(t.exponents, 0.0) + t.coeff
        return {e: c for e, c in coeffs.items() if c != 0.0}

    def equivalent(self, other: 'Observable') -> bool:
        """Same polynomial after collecting like terms."""
        return self._collected() == other._collected()

    def to_dict(self) -> Dict[str, Any]:
        return {'terms': [{'coeff': t.coeff, 'exponents': list(t.exponents)} for t in self.terms]}

    def __repr__(self):
        return f"Observable({[(t.coeff, t.exponents) for t in self.terms]})"


@dataclass(eq=False)
class ReactionNetwork:
    species_names: List[str]
    reactions: List[Reaction]
    initial_state: np.ndarray
    final_time: float
    conservation_vector: np.ndarray
    state_bounds: np.ndarray
    name: str = ''
    analytic: Optional[str] = None
    stoichiometry: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.species_names = list(self.species_names)
        self.reactions = list(self.reactions)
        self.initial_state = np.asarray(self.initial_state, dtype=np.int64)
        self.conservation_vector = np.asarray(self.conservation_vector, dtype=float)
        self.state_bounds = np.asarray(self.state_bounds, dtype=np.int64)
        self.final_time = float(self.final_time)
        d = len(self.species_names)
        for label, vec in (('initial', self.initial_state), ('n', self.conservation_vector),
                           ('x_max', self.state_bounds)):
            if vec.shape != (d,):
                raise ConfigurationError(f"'{label}' has {vec.shape[0] if vec.ndim else 0} "
                                         f"components, expected {d}")
        for j, reaction in enumerate(self.reactions):
            if reaction.d != d:
                raise ConfigurationError(f"reaction {j} has {reaction.d} components, expected {d}")
        if not self.final_time > 0:
            raise ConfigurationError(f"final time must be positive, got {self.final_time}")
        self.stoichiometry = (np.array([r.nu for r in self.reactions], dtype=np.int64)
                              if self.reactions else np.zeros((0, d), dtype=np.int64))

    @property
    def d(self) -> int:
        return len(self.species_names)

    @property
    def M(self) -> int:
        return len(self.reactions)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'species': self.species_names,
            'initial': self.initial_state.tolist(),
            't_final': self.final_time,
            'n': self.conservation_vector.tolist(),
            'x_max': self.state_bounds.tolist(),
            'reactions': [r.to_dict() for r in self.reactions],
        }


class ExtendedPropensity(NamedTuple):
    value: float
    reduced_smoothness: bool


@dataclass
class ValidationReport:
    violations: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations

    def raise_if_invalid(self):
        if self.violations:
            raise ModelValidationError(self.violations)

    def to_dict(self) -> Dict[str, Any]:
        return {'valid': self.valid, 'violations': self.violations, 'warnings': self.warnings}


# per-species factors

def _quintic_order1(t: float) -> Tuple[float, float]:
    # 6t^3 - 8t^4 + 3t^5 matches x, 1, 0 at t = 1 and vanishes to second order at 0
    t2 = t * t
    return (6 * t * t2 - 8 * t2 * t2 + 3 * t2 * t2 * t,
            18 * t2 - 32 * t * t2 + 15 * t2 * t2)


def _quintic_order2(s: float) -> Tuple[float, float]:
    # 9s^3 - 11s^4 + 4s^5 with s = x - 1 matches x(x-1), 2x-1, 2 at x = 2
    s2 = s * s
    return (9 * s * s2 - 11 * s2 * s2 + 4 * s2 * s2 * s,
            27 * s2 - 44 * s * s2 + 20 * s2 * s2)


def falling_factorial(x: float, r: int) -> float:
    value = 1.0
    for k in range(r):
        value *= (x - k)
    return value


def _falling_factorial_derivative(x: float, r: int) -> float:
    total = 0.0
    for k in range(r):
        term = 1.0
        for m in range(r):
            if m != k:
                term *= (x - m)
        total += term
    return total


def smooth_factor(x: float, r: int) -> Tuple[float, float]:
    """Value and derivative of the extended falling factorial of order r at real x."""
    if r == 0:
        return 1.0, 0.0
    if r == 1:
        if x <= 0.0:
            return 0.0, 0.0
        if x <= 1.0:
            return _quintic_order1(x)
        return x, 1.0
    if r == 2:
        if x <= 1.0:
            return 0.0, 0.0
        if x < 2.0:
            return _quintic_order2(x - 1.0)
        return x * (x - 1.0), 2.0 * x - 1.0
    # order >= 3: raw polynomial clamped at its largest root
    if x <= r - 1:
        return 0.0, 0.0
    return falling_factorial(x, r), _falling_factorial_derivative(x, r)


def _check_dimension(reaction: Reaction, state) -> np.ndarray:
    x = np.asarray(state)
    if x.shape != (reaction.d,):
        raise ConfigurationError(f"state has shape {x.shape}, reaction expects ({reaction.d},)")
    return x


def evaluate_propensity(reaction: Reaction, state) -> float:
    """a_j(x) on the integer lattice; zero wherever some x_i < r_ij."""
    x = _check_dimension(reaction, state)
    value = reaction.rate_constant
    for i, r in reaction.factors:
        xi = int(x[i])
        if xi < r:
            return 0.0
        value *= falling_factorial(xi, r)
    return float(value)


def extend_propensity_smooth(reaction: Reaction, point) -> ExtendedPropensity:
    """C^2, nonnegative, monotone extension of a_j to real points."""
    x = _check_dimension(reaction, point)
    value = reaction.rate_constant
    for i, r in reaction.factors:
        value *= smooth_factor(float(x[i]), r)[0]
    return ExtendedPropensity(float(value), reaction.reduced_smoothness)


def evaluate_propensity_gradient(reaction: Reaction, state) -> np.ndarray:
    """Analytic gradient of the smooth extension (product rule over species factors)."""
    x = _check_dimension(reaction, state)
    grad = np.zeros(reaction.d)
    if not reaction.factors:
        return grad
    values = []
    derivatives = []
    for i, r in reaction.factors:
        v, dv = smooth_factor(float(x[i]), r)
        values.append(v)
        derivatives.append(dv)
    for k, (i, _) in enumerate(reaction.factors):
        partial = reaction.rate_constant * derivatives[k]
        for m, v in enumerate(values):
            if m != k:
                partial *= v
        grad[i] = partial
    return grad


def propensity_vector(net: ReactionNetwork, state) -> np.ndarray:
    """All a_j(x) at once (lattice values)."""
    x = [int(v) for v in state]
    out = np.empty(net.M)
    for j, reaction in enumerate(net.reactions):
        value = reaction.rate_constant
        for i, r in reaction.factors:
            xi = x[i]
            if xi < r:
                value = 0.0
                break
            value *= falling_factorial(xi, r)
        out[j] = value
    return out


def propensity_gradients(net: ReactionNetwork, state) -> np.ndarray:
    """M x d matrix whose row j is the gradient of a_j."""
    if net.M == 0:
        return np.zeros((0, net.d))
    return np.array([evaluate_propensity_gradient(r, state) for r in net.reactions])


def total_propensity(net: ReactionNetwork, state) -> float:
    return float(propensity_vector(net, state).sum())


def evaluate_observable(obs: Observable, state) -> float:
    x = np.asarray(state, dtype=float)
    if obs.terms and x.shape != (obs.d,):
        raise ConfigurationError(f"state has shape {x.shape}, observable expects ({obs.d},)")
    total = 0.0
    for term in obs.terms:
        value = term.coeff
        for xi, e in zip(x, term.exponents):
            if e:
                value *= xi ** e
        total += value
    return float(total)


def observable_gradient(obs: Observable, state) -> np.ndarray:
    x = np.asarray(state, dtype=float)
    grad = np.zeros(obs.d if obs.terms else x.shape[0])
    for term in obs.terms:
        for i, e in enumerate(term.exponents):
            if e == 0:
                continue
            partial = term.coeff * e * x[i] ** (e - 1)
            for k, (xk, ek) in enumerate(zip(x, term.exponents)):
                if k != i and ek:
                    partial *= xk ** ek
            grad[i] += partial
    return grad


def scaled_observable(obs: Observable, gamma: float) -> Observable:
    """g(x / gamma) for polynomial g."""
    return Observable([(t.coeff * gamma ** (-sum(t.exponents)), t.exponents) for t in obs.terms])


# structural validation

def hyperplane_bounds(net: ReactionNetwork) -> np.ndarray:
    """Largest value of each species on the hyperplane n.(x - X0) <= 0, x >= 0."""
    budget = float(net.conservation_vector @ net.initial_state)
    with np.errstate(divide='ignore'):
        return np.floor(budget / net.conservation_vector + 1e-9).astype(np.int64)


def state_graph(net: ReactionNetwork, max_states: int = DEFAULT_STATE_GRAPH_CAP) -> nx.DiGraph:
    """Directed graph of lattice states reachable from X0 inside the box.

    Jumps that leave the box end in the sink node 'outside'.
    """
    graph = nx.DiGraph()
    start = tuple(int(v) for v in net.initial_state)
    graph.add_node(start)
    frontier = [start]
    bounds = net.state_bounds
    while frontier:
        x = frontier.pop()
        rates = propensity_vector(net, x)
        for j, reaction in enumerate(net.reactions):
            if rates[j] <= 0:
                continue
            y = tuple(int(v) for v in np.asarray(x) + reaction.nu)
            if any(v < 0 or v > b for v, b in zip(y, bounds)):
                graph.add_edge(x, 'outside', reaction=j)
                continue
            if y not in graph:
                if graph.number_of_nodes() >= max_states:
                    raise ConfigurationError(f"state graph exceeds {max_states} states")
                frontier.append(y)
            graph.add_edge(x, y, reaction=j, rate=rates[j])
    return graph


def reachable_states(net: ReactionNetwork, max_states: int = DEFAULT_STATE_GRAPH_CAP) -> set:
    graph = state_graph(net, max_states)
    start = tuple(int(v) for v in net.initial_state)
    return {start} | nx.descendants(graph, start)


def validate_network(net: ReactionNetwork, max_states: int = DEFAULT_STATE_GRAPH_CAP,
                     allow_constant_channels: bool = False) -> ValidationReport:
    """Structural checks; violations are fatal for the backward solver.

    With allow_constant_channels a channel firing at the origin is only a
    warning, as long as n.nu <= 0 still bounds the population.
    """
    report = ValidationReport()
    n = net.conservation_vector

    if np.any(n <= 0):
        report.violations.append(f"conservation vector must be strictly positive, got {n.tolist()}")
    for j, reaction in enumerate(net.reactions):
        drift = float(n @ reaction.nu)
        if drift > 0:
            report.violations.append(f"reaction {j}: n.nu = {drift:g} > 0 (population not bounded)")
        fires_at_origin = evaluate_propensity(reaction, np.zeros(net.d, dtype=np.int64)) != 0.0
        if fires_at_origin:
            (report.warnings if allow_constant_channels else report.violations).append(
                f"reaction {j}: propensity at the origin is nonzero")
        short = np.nonzero(reaction.reactant_orders < -reaction.nu)[0]
        if short.size:
            (report.warnings if allow_constant_channels and fires_at_origin else report.violations).append(
                f"reaction {j}: reactant orders {reaction.reactant_orders.tolist()} allow species "
                f"{[net.species_names[i] for i in short]} to become negative")
        if reaction.reduced_smoothness:
            report.warnings.append(f"reaction {j}: order > 2 in one species, extension is only clamped")
    if np.any(net.initial_state < 0) or np.any(net.initial_state > net.state_bounds):
        report.violations.append(f"initial state {net.initial_state.tolist()} outside "
                                 f"[0, {net.state_bounds.tolist()}]")
    if not report.valid:
        return report

    bounds = hyperplane_bounds(net)
    if np.all(bounds <= net.state_bounds):
        return report

    report.warnings.append(f"x_max {net.state_bounds.tolist()} does not cover the conservation "
                           f"simplex (bounds {bounds.tolist()}); checking reachable states")
    try:
        reach = reachable_states(net, max_states)
    except ConfigurationError:
        report.violations.append("x_max does not cover the conservation simplex and the reachable "
                                 "set is too large to certify")
        return report
    if 'outside' in reach:
        report.violations.append(f"a state reachable from X0 leaves the box [0, {net.state_bounds.tolist()}]")
    return report


# analytic references for the linear death process X -> 0, a(x) = c x

def decay_moment_reference(x0: int, c: float, final_time: float, moment: int) -> float:
    """E[X_T^m] for the pure death process; X_T ~ Binomial(x0, exp(-cT))."""
    return float(stats.binom(int(x0), math.exp(-c * final_time)).moment(moment))


def tau_leap_decay_mean(x0: int, c: float, grid: Sequence[float]) -> float:
    """Exact first moment of the (plain or bridge) tau-leap on the given grid."""
    taus = np.diff(np.asarray(grid, dtype=float))
    return float(x0 * np.prod(1.0 - c * taus))


def decay_family(order: int, gamma: float, z0: float = 1.0, rate: float = 1.0,
                 final_time: float = 1.0) -> ReactionNetwork:
    """Single-species decay with propensity c (x)_p and X0 = gamma * z0."""
    x0 = int(round(gamma * z0))
    return ReactionNetwork(
        species_names=['X'],
        reactions=[Reaction([-1], rate, [order])],
        initial_state=[x0],
        final_time=final_time,
        conservation_vector=[1.0],
        state_bounds=[x0],
        name=f"decay-p{order}-gamma{gamma:g}",
        analytic='decay' if order == 1 else None,
    )


# model files

def _require(data: Dict[str, Any], key: str, path: Optional[str]):
    if key not in data:
        raise ModelParseError("missing required field", path, key)
    return data[key]


def network_from_dict(data: Dict[str, Any], path: Optional[str] = None) -> Tuple[ReactionNetwork, Observable]:
    if not isinstance(data, dict):
        raise ModelParseError("model document must be a mapping", path)
    species = _require(data, 'species', path)
    reactions = []
    for k, entry in enumerate(_require(data, 'reactions', path) or []):
        try:
            reactions.append(Reaction(entry['nu'], entry['c'], entry.get('orders'), entry.get('name', '')))
        except (KeyError, TypeError) as e:
            raise ModelParseError(f"malformed reaction: {e}", path, f"reactions[{k}]") from e
        except ConfigurationError as e:
            raise ModelParseError(str(e), path, f"reactions[{k}]") from e
    try:
        net = ReactionNetwork(
            species_names=species,
            reactions=reactions,
            initial_state=_require(data, 'initial', path),
            final_time=_require(data, 't_final', path),
            conservation_vector=_require(data, 'n', path),
            state_bounds=_require(data, 'x_max', path),
            name=data.get('name', ''),
            analytic=data.get('analytic'),
        )
    except ConfigurationError as e:
        raise ModelParseError(str(e), path) from e

    obs_data = data.get('observable')
    if obs_data is None:
        observable = Observable.linear([1.0] * net.d)
    else:
        try:
            observable = Observable([(t['coeff'], t['exponents']) for t in obs_data['terms']])
        except (KeyError, TypeError) as e:
            raise ModelParseError(f"malformed observable: {e}", path, 'observable') from e
        if observable.terms and observable.d != net.d:
            raise ModelParseError(f"observable has {observable.d} components, expected {net.d}",
                                  path, 'observable')
    return net, observable


def network_to_dict(net: ReactionNetwork, observable: Observable) -> Dict[str, Any]:
    data = net.to_dict()
    if net.analytic:
        data['analytic'] = net.analytic
    data['observable'] = observable.to_dict()
    return data


def load_model_file(path) -> Tuple[ReactionNetwork, Observable]:
    path = Path(path)
    if not path.exists():
        candidate = BUNDLED_MODELS_DIR / path.name
        if candidate.exists():
            path = candidate
        elif (BUNDLED_MODELS_DIR / f"{path.name}.yaml").exists():
            path = BUNDLED_MODELS_DIR / f"{path.name}.yaml"
        else:
            raise ModelParseError("model file not found", str(path))
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        where = f"line {mark.line + 1}" if mark is not None else None
        raise ModelParseError(f"YAML syntax error: {getattr(e, 'problem', e)}", str(path), where) from e
    return network_from_dict(data, str(path))


def save_model_file(path, net: ReactionNetwork, observable: Observable):
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(network_to_dict(net, observable), f, sort_keys=False)
