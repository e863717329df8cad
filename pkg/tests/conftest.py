import pytest

# (criterion, passed, detail) lines collected by the acceptance module
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []


@pytest.fixture
def verdict():
    def record(name: str, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append((name, passed, detail))
        print(f"{name}: {'PASS' if passed else 'FAIL'} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{name}: {'PASS' if passed else 'FAIL'}  {detail}")
