import pytest

# filled by test_acceptance.py; echoed after the run so the verdicts show up
# even when output capture is on
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict():
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        VERDICTS.append(line)
        print(line)
    return record
