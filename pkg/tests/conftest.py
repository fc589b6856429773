"""Shared pytest wiring: collects the acceptance criteria's result lines
and prints them as one summary block, so a plain ``pytest -v`` run shows
one pass/fail line per criterion without needing ``-s``."""

_criterion_lines: list[str] = []
_failed_criteria: list[str] = []


def note_criterion(line: str) -> None:
    _criterion_lines.append(line)


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid and report.failed:
        _failed_criteria.append(report.nodeid.split("::")[-1])


def pytest_terminal_summary(terminalreporter):
    if not _criterion_lines and not _failed_criteria:
        return
    terminalreporter.section("acceptance criteria")
    for line in _criterion_lines:
        terminalreporter.write_line(line)
    for name in _failed_criteria:
        terminalreporter.write_line(f"[FAIL] {name}")
