"""Collects acceptance verdicts and prints them as one line each after the run."""

import pytest

_VERDICTS = {}


@pytest.fixture
def verdict():
    """``verdict(number, ok, detail)`` records a criterion outcome, then asserts it."""

    def record(number, ok, detail):
        _VERDICTS[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        ok, detail = _VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
