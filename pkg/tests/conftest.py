import numpy as np
import pytest

from gibbsflow.core import Box
from gibbsflow.dynamics import RateFamily
from gibbsflow.gibbs import Specification, ising1d, ising2d


@pytest.fixture
def ring3():
    return Box.ring(3)


@pytest.fixture
def ising_ring():
    spec = Specification(ising1d(), 0.5)
    return spec, Box.ring(4), RateFamily.heat_bath(spec)


@pytest.fixture
def ising_torus():
    spec = Specification(ising2d(), 0.2)
    return spec, Box.torus(2, 2), RateFamily.heat_bath(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
