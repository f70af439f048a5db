import sys
from pathlib import Path

import numpy as np
import pytest

from geodistill.synth import make_icosphere

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def ico3():
    return make_icosphere(3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
