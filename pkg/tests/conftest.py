import sys
from pathlib import Path

import numpy as np
import pytest

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE / "oracles"))

FIXTURES = HERE / "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run a test once per kernel backend."""
    from mfnerf import kernels

    previous = kernels.BACKEND
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


# --------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion after the run

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = mark.args
        entry = _CRITERIA.setdefault(number, {"title": title, "passed": 0, "total": 0, "notes": []})
        entry["total"] += 1
        # an expected failure is still a failure of the criterion
        entry["passed"] += report.outcome == "passed" and not hasattr(report, "wasxfail")
        for name, value in item.user_properties:
            if name == "note":
                entry["notes"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["passed"] == e["total"] else "FAIL"
        line = f"criterion {number} {status}: {e['title']} ({e['passed']}/{e['total']} checks)"
        if e["notes"]:
            line += " | " + "; ".join(e["notes"])
        terminalreporter.write_line(line)
