import pytest

from kinetics.model import Observable, Reaction, ReactionNetwork, load_model_file
from kinetics.sampling import RngStream


@pytest.fixture
def decay1():
    return load_model_file('decay_example1')


@pytest.fixture
def decay3():
    return load_model_file('decay_example3')


@pytest.fixture
def dimer():
    return load_model_file('dimer')


@pytest.fixture
def rng():
    return RngStream(12345, 0)


@pytest.fixture
def constant_network():
    """X -> 0 at a constant rate, far from extinction."""
    net = ReactionNetwork(
        species_names=['X'],
        reactions=[Reaction([-1], 3.0, [0])],
        initial_state=[1_000_000],
        final_time=1.0,
        conservation_vector=[1.0],
        state_bounds=[1_000_000],
        name='constant',
    )
    return net, Observable.monomial([1])
