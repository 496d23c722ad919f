import pytest

# acceptance verdicts, filled by tests/test_acceptance.py
VERDICTS: dict = {}


@pytest.fixture
def verdict():
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])
