import numpy as np
import pytest

from crowdsim.scenario import load_scenario
from ppum import GridSpec, ProbabilityGrid, uniform_grid


@pytest.fixture
def small_spec():
    return GridSpec(10.0, 10)


@pytest.fixture
def uniform10(small_spec):
    return uniform_grid(small_spec)


@pytest.fixture
def delta10(small_spec):
    values = np.zeros((10, 10))
    values[2, 3] = 1.0
    return ProbabilityGrid(small_spec, values)


@pytest.fixture
def corridor():
    return load_scenario("case1_corridor")
