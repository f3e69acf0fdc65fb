import numpy as np
import pytest

from pointgl.numcore import precision

from helpers import ACCEPTANCE_LINES


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("] ", 1)[1].split(".", 1)[0])):
            terminalreporter.write_line(line)
