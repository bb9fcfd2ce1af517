import pytest

RESULTS = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion: criterion(n, ok, detail, seconds)."""
    def record(n, ok, detail, seconds):
        RESULTS[n] = (ok, detail, seconds)
    return record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail, seconds = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  ({seconds:.2f} s)")
