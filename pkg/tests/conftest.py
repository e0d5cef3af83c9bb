import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_line():
    """Record ``(criterion, passed, detail)``; printed in the terminal summary."""

    def record(number, passed, detail):
        ACCEPTANCE_LINES.append((number, passed, detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda x: str(x[0])):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
