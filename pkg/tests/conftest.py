"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_outcomes: dict[str, tuple[str, str]] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    name = marker.args[0]
    exc = call.excinfo
    if exc is not None and exc.errisinstance(pytest.skip.Exception):
        _outcomes[name] = ("BLOCKED", str(exc.value.msg))
    elif call.when == "call":
        _outcomes[name] = ("PASS", "") if exc is None else ("FAIL", exc.exconly().splitlines()[0])
    elif exc is not None:
        _outcomes[name] = ("FAIL", exc.exconly().splitlines()[0])


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in _outcomes.items():
        terminalreporter.write_line(f"{status:7s} {name}" + (f"  ({detail})" if detail else ""))
