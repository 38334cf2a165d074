import numpy as np
import pytest

from dwfiber.protocol import synthetic_protocol
from dwfiber.sphere import build_dictionary


@pytest.fixture(scope="session")
def dictionary():
    return build_dictionary(362, 0)


@pytest.fixture(scope="session")
def small_dictionary():
    return build_dictionary(60, 0)


@pytest.fixture(scope="session")
def stanford_protocol():
    """150 directions at b=2000 plus 10 b=0 volumes."""
    return synthetic_protocol(150, 2000.0, 10)


@pytest.fixture(scope="session")
def small_protocol():
    return synthetic_protocol(30, 2000.0, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(number, ok, detail):
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
