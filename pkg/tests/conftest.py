import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """``record(n, passed, detail)`` files a line for the acceptance summary."""

    def _record(criterion: int, passed: bool, detail: str) -> bool:
        _RESULTS[criterion] = (bool(passed), detail)
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        passed, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
