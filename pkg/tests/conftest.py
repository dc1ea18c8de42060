import numpy as np
import pytest

from topomesh.synth import make_grid, make_quad_sphere

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one acceptance line: ``acceptance("A1", passed, "detail")``."""

    def record(key, passed, detail):
        line = f"{key} {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid3():
    return make_grid(3, 3)


@pytest.fixture(scope="session")
def sphere3():
    return make_quad_sphere(3)
