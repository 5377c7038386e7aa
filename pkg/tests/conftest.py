import pytest

CRITERIA: dict = {}


@pytest.fixture
def record():
    """Store a criterion outcome for the end-of-run summary, then assert it."""

    def _record(number, title, ok, detail):
        CRITERIA[number] = (bool(ok), title, detail)
        assert ok, f"criterion {number} ({title}): {detail}"

    return _record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, title, detail = CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {number:>2} {title}: {detail}")
