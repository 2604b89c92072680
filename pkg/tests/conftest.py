from __future__ import annotations

import sys

import pytest

from rivals.scenario import run_scenario


@pytest.fixture(scope="session")
def scenario_run():
    """The reference fixture run (seed 0), shared by read-only tests."""
    return run_scenario("financial-q1", 0)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines after the run."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
