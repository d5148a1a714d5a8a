import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for a criterion, then assert it."""
    def record(name: str, ok: bool, detail: str):
        VERDICTS.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
