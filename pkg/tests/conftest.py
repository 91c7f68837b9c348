import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Callable that records a line for the acceptance summary."""
    return ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
