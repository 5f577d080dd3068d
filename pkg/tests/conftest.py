import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion():
    """Record one acceptance line; the summary prints them all after the run."""

    def record(label, passed, detail, soft=False):
        status = "PASS" if passed else ("SOFT-FAIL" if soft else "FAIL")
        line = f"[{status}] {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
