import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from koopcontract.fixtures import load_fixture
from koopcontract.grid import SampleBox
from koopcontract.kkl import build_phi0, build_remainder

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def polyflow():
    return load_fixture("polyflow")


@pytest.fixture(scope="session")
def controlled():
    return load_fixture("controlled")


@pytest.fixture(scope="session")
def cubic_kkl():
    """phi0 for x' = -x - x^3 tabulated on [-2, 2] with 801 nodes (shared, ~6 s)."""
    sys, _ = load_fixture("cubic")
    rem = build_remainder(sys)
    sol, report = build_phi0(rem, SampleBox((-2.0,), (2.0,), (801,)), T_h=40.0, dt=1e-3)
    return sys, rem, sol, report


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
