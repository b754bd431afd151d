import sys
import numpy as np
import pytest

from critflow.geometry import Domain, build_grid


@pytest.fixture(scope="session")
def ball512():
    return build_grid(Domain.ball(1.0, 3), "radial", n_nodes=512)


@pytest.fixture(scope="session")
def ball_cart():
    return build_grid(Domain.ball(1.0, 3), "cartesian", h=1.0 / 16)


@pytest.fixture(scope="session")
def annulus256():
    return build_grid(Domain.annulus(0.5, 1.0, 3), "radial", n_nodes=256)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
