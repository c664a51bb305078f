import numpy as np
import pytest

from lipforge.construct import ConstructConfig, OscillatorParams, iterate
from lipforge.expr import MapExpr
from lipforge.geometry import make_domain


def pytest_addoption(parser):
    parser.addoption("--slow", action="store_true", default=False, help="run the long i >= 10 suites")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running suite, enabled with --slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--slow"):
        return
    skip = pytest.mark.skip(reason="needs --slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def unit_square():
    return make_domain({"box": [(0, 1), (0, 1)], "gamma": [], "exterior": True})


@pytest.fixture(scope="session")
def zero2():
    return MapExpr.parse("0", 2)


@pytest.fixture(scope="session")
def one2():
    return MapExpr.parse("1", 2)


@pytest.fixture(scope="session")
def default_run(unit_square, zero2, one2):
    """The default scenario: f = 0, psi = 1 on the unit square, i_max = 4, seed 42."""
    cfg = ConstructConfig(params=OscillatorParams(seed=42))
    return iterate(zero2, one2, unit_square, 4, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# -- acceptance verdicts ----------------------------------------------------------

_VERDICTS = []


class Verdicts:
    """Collects one line per acceptance criterion for the terminal summary."""

    def record(self, number, title, passed, detail=""):
        _VERDICTS.append((number, title, bool(passed), detail))
        return bool(passed)


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_VERDICTS, key=lambda v: (int(str(v[0]).split()[0]), str(v[0]))):
        line = f"[{'PASS' if passed else 'FAIL'}] {str(number):>9}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
