import pytest

ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; returns the pass flag so the test can assert on it."""

    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE.append(f"criterion {number} [{name}]: {'PASS' if passed else 'FAIL'} ({detail})")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
