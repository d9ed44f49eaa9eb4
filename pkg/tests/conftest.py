"""Shared test plumbing: acceptance criteria report lines.

Criterion tests record one line each; the lines are printed in a dedicated
section after the run so pass/fail status survives pytest's output capture.
"""

_CRITERION_LINES: list[str] = []


def record_criterion(line: str) -> None:
    _CRITERION_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERION_LINES):
            terminalreporter.write_line(line)
