import numpy as np
import pytest

from lagrangia import elgrad
from lagrangia.dynamics import KINDS, ForcingSpec, SystemSpec, simulate
from lagrangia.symlib import build_library

EXPECTED_LIBRARY_SIZE = {
    "single_pendulum": 12,
    "cart_pendulum": 55,
    "double_pendulum": 89,
    "spherical_pendulum": 59,
}


def central_fd(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture(scope="session")
def systems():
    return {k: SystemSpec(k) for k in KINDS}


@pytest.fixture(scope="session")
def libraries(systems):
    return {k: build_library(s.space, s.library_spec()) for k, s in systems.items()}


@pytest.fixture(scope="session")
def passive_data(systems):
    """Short clean passive datasets, 4 trajectories x 1 s per system."""
    return {k: simulate(s, 4, 1.0, 0.01, seed=7) for k, s in systems.items()}


@pytest.fixture(scope="session")
def forced_data(systems):
    return {k: simulate(s, 4, 1.0, 0.01, seed=7, forcing=ForcingSpec(active=True)) for k, s in systems.items()}


@pytest.fixture(scope="session")
def passive_tensors(libraries, passive_data):
    return {k: elgrad.assemble_tensors(libraries[k], passive_data[k]) for k in KINDS}


@pytest.fixture(scope="session")
def forced_tensors(libraries, forced_data):
    return {k: elgrad.assemble_tensors(libraries[k], forced_data[k]) for k in KINDS}


# -- acceptance reporting ---------------------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title): acceptance criterion a test belongs to")


@pytest.fixture
def record(request):
    """Attach a detail line to the current test's acceptance criterion."""
    marker = request.node.get_closest_marker("criterion")
    entry = _CRITERIA.setdefault(marker.args[0], {"title": marker.args[1], "tests": {}, "notes": []})

    def _record(line):
        entry["notes"].append(f"{request.node.name}: {line}")

    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"title": marker.args[1], "tests": {}, "notes": []})
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry["tests"][item.nodeid] = (rep.outcome, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(_CRITERIA):
        entry = _CRITERIA[cid]
        results = entry["tests"].values()
        ok = results and all(o == "passed" for o, _ in results)
        seconds = sum(d for _, d in results)
        n_pass = sum(o == "passed" for o, _ in results)
        tr.write_line(f"criterion {cid} {'PASS' if ok else 'FAIL'}: {entry['title']} ({n_pass}/{len(results)} checks, {seconds:.1f}s)")
        for note in entry["notes"]:
            tr.write_line(f"    {note}")
