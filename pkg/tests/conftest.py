import numpy as np
import pytest

from phaseless.fields import GridSpec
from phaseless.scatterers import build_background, build_bump, build_potential, make_family

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = mark.args
        detail = getattr(item, "acceptance_detail", "")
        _CRITERIA[number] = (report.outcome == "passed", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def potential_grid():
    return GridSpec(2, 1.25, 40)


@pytest.fixture(scope="session")
def potential(potential_grid):
    return build_potential(potential_grid, 1.0, "autocorrelation")


@pytest.fixture(scope="session")
def complex_potential(potential_grid):
    return build_potential(potential_grid, 1.0, "asymmetric", amplitude=1.0 + 0.5j)


@pytest.fixture(scope="session")
def background():
    q = build_bump(GridSpec(2, 2.5, 80), 1.0)
    return build_background(q, 1.0, 1.0)


@pytest.fixture(scope="session")
def families(background):
    return {mode: make_family(background, mode, 1.0, translate=(6.0, 0.0), y=(2.0, 1.0), s=2.0)
            for mode in ("iw-pair", "translate-pair", "lattice")}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
