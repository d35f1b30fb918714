import pytest

from mpix import Universe
from mpix.collectives import registry


@pytest.fixture
def universe_factory():
    made = []

    def make(n_ranks, node_map=None, ppn=None, timeout=10.0):
        u = Universe(n_ranks, node_map, ppn=ppn, timeout=timeout)
        made.append(u)
        return u

    yield make
    for u in made:
        u.close()


@pytest.fixture(autouse=True)
def _fresh_registry():
    yield
    registry.reset()


_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance[report.nodeid.split("::")[-1]] = report.outcome.upper()


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance.items():
        terminalreporter.write_line(f"{'PASS' if outcome == 'PASSED' else 'FAIL'}  {name}")
