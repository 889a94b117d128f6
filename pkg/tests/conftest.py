"""Collects acceptance-criterion verdicts and prints them after the run."""

import pytest

_VERDICTS = {}


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records and prints one criterion line, then asserts."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[(number, request.node.name)] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[key])
