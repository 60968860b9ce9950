import numpy as np
import pytest

from gdpl.corpus import generate_corpus
from gdpl.ontology import default_world
from gdpl.simulator import SimulatorConfig


@pytest.fixture(scope="session")
def world():
    return default_world(0)


@pytest.fixture(scope="session")
def corpus(world):
    sessions, _ = generate_corpus(300, world, SimulatorConfig(), 0.1, seed=5)
    return sessions


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
