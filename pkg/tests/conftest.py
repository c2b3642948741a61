import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from abms.diffusion import NoiseSchedule
from abms.prior import GaussianMixture, canonical_prior

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

#: lines printed by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def sched100():
    return NoiseSchedule.linear(100)


@pytest.fixture(scope="session")
def sched1000():
    return NoiseSchedule.linear(1000)


@pytest.fixture(scope="session")
def gmm2d():
    return canonical_prior("gmm2d_2", 0)


@pytest.fixture(scope="session")
def ring():
    return canonical_prior("ring2d_8", 0)


@pytest.fixture(scope="session")
def gmm16d():
    return canonical_prior("gmm16d_4", 0)


@pytest.fixture(scope="session")
def single_gaussian():
    S = np.array([[0.5, 0.2], [0.2, 0.3]])
    return GaussianMixture(np.array([1.0]), np.array([[0.7, -0.4]]), S[None])
