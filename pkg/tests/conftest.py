import pytest

ACCEPTANCE_LINES = {}


@pytest.fixture
def report():
    """Record one acceptance line: report(criterion, passed, detail)."""
    def record(criterion, passed, detail=""):
        ACCEPTANCE_LINES.setdefault(criterion, []).append((bool(passed), detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE_LINES):
        entries = ACCEPTANCE_LINES[criterion]
        verdict = "PASS" if all(ok for ok, _ in entries) else "FAIL"
        details = "; ".join(d for _, d in entries if d)
        terminalreporter.write_line(f"criterion {criterion}: {verdict}  {details}")
