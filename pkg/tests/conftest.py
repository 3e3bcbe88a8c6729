import pytest

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report_criterion():
    """``report_criterion(n, passed, detail)`` records one acceptance line."""

    def record(n: int, passed: bool, detail: str):
        _ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
