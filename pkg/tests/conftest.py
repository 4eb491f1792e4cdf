import pytest

_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for an acceptance criterion.

    Call ``criterion(number, passed, detail)``; the result is asserted and
    also collected for the end-of-run summary.
    """

    def record(number, passed, detail=""):
        _CRITERIA[number] = (bool(passed), detail)
        assert passed, f"criterion {number} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(
            f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
