"""Collects the one-line acceptance verdicts and prints them at the end of the session."""

ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
