"""Shared pytest plumbing: the acceptance-criteria summary block.

Acceptance tests append one ``criterion NN label: PASS/FAIL`` line each via
the ``acceptance_report`` fixture; the terminal summary reprints them in one
place after the run so the verdict survives pytest's output capturing.
"""
import pytest


@pytest.fixture(scope="session")
def acceptance_report(request):
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
