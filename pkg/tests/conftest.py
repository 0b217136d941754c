import math
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spincant.model import Segment, PhaseSchedule

settings.register_profile(
    "default", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []

SX = np.array([[0, 1], [1, 0]]) / 2
SZ = np.array([[1, 0], [0, -1]]) / 2


def ladder(n):
    """Lowering operator, position and momentum matrices on ``n`` Fock states."""
    a = np.diag(np.sqrt(np.arange(1, n)), 1).astype(complex)
    z = (a + a.T) / math.sqrt(2)
    p = 1j * (a.T - a) / math.sqrt(2)
    return a, z, p


def dense_hamiltonian(params, phidot, n):
    """Matrix of H on (spin up block, spin down block) built from ladder operators."""
    _, z, _ = ladder(n)
    osc = np.diag(np.arange(n) + 0.5)
    eye = np.eye(n)
    return (np.kron(np.eye(2), osc) + phidot * np.kron(SZ, eye)
            - params.epsilon * np.kron(SX, eye) - 2 * params.eta * np.kron(SZ, z))


def constant_schedule(rate=0.0):
    return PhaseSchedule((Segment(0.0, float("inf"), offset=rate),), name="const")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _quiet_high_temperature():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*high-temperature.*")
        yield
