import numpy as np
import pytest
from hypothesis import settings

from epiident.ctmc import run_ensemble
from epiident.rng import RngSeed
from epiident.scenarios import make_scenario
from epiident.sir import integrate_sir

# fixed example sequence so property tests give the same verdict on every run
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


@pytest.fixture(scope="session")
def base_scenario():
    return make_scenario(0.1, 0.0004)


@pytest.fixture(scope="session")
def base_ode(base_scenario):
    s = base_scenario
    return integrate_sir(s.params, s.initial, s.grid)


@pytest.fixture(scope="session")
def base_ensemble(base_scenario):
    s = base_scenario
    return run_ensemble(s.params, s.initial, s.grid, 300, RngSeed(11), 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, line: str) -> None:
    _CRITERIA[number] = line


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[k])
