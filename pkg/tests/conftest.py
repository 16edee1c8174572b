"""Shared pytest plumbing.

The acceptance tests record one PASS/FAIL line each; emitting them in the
terminal summary keeps them visible in a plain ``pytest -v`` run, where
per-test stdout is captured.
"""

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance gate")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
