import pytest

ACCEPTANCE = []


@pytest.fixture
def record():
    """Log one acceptance line, then fail the test if the criterion failed."""
    def _record(number: int, name: str, ok: bool, detail: str):
        ACCEPTANCE.append(f"criterion {number} ({name}): {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
