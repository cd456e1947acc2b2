import numpy as np
import pytest

from ptmlearn.manifold import SamplingGrid

# acceptance criterion results, printed as a summary block at the end of
# the run so the pass/fail lines survive pytest's output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid16():
    # centered window so rotations stay inside it
    return SamplingGrid(-8.0, -8.0, 16.0, 16.0, 16, 16)


@pytest.fixture
def grid8():
    return SamplingGrid(-4.0, -4.0, 8.0, 8.0, 8, 8)
