import pytest

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance_report():
    """Record one verdict line per acceptance criterion and assert it."""

    def report(number: int, ok: bool, message: str):
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'} {message}"
        _ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
