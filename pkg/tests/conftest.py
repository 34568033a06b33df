import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ccdopf.config import fleet_config, node5_config  # noqa: E402
from ccdopf.netmodel import case33bw  # noqa: E402


@pytest.fixture(scope="session")
def net33():
    return case33bw()


@pytest.fixture(scope="session")
def fleet():
    return fleet_config()


@pytest.fixture(scope="session")
def node5():
    return node5_config()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
