import re

import numpy as np
import pytest
from hypothesis import settings

from lyapflow.graph import synthetic_fixture

settings.register_profile("lyapflow", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("lyapflow")

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_outcomes: dict[int, tuple[str, str]] = {}


@pytest.fixture(scope="session")
def fixture_ds():
    return synthetic_fixture()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None:
        return
    num, name = int(m.group(1)), m.group(2)
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        prev = _outcomes.get(num)
        if prev is None or prev[1] == "PASS":
            _outcomes[num] = (name, "FAIL" if failed else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_outcomes):
        name, status = _outcomes[num]
        terminalreporter.write_line(f"criterion {num:2d} {status}  {name.replace('_', ' ')}")
