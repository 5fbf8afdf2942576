import pytest

# criterion number -> (passed, one-line detail); filled by the acceptance tests
ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(passed), detail)
        print(format_line(number))
        return passed
    return record


def format_line(number: int) -> str:
    passed, detail = ACCEPTANCE[number]
    return f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(format_line(n))
