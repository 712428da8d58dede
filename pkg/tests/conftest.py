"""Collects acceptance outcomes and prints one pass/fail line per criterion."""
from collections import defaultdict

import pytest

_outcomes: dict[int, dict] = defaultdict(lambda: {"title": "", "passed": True, "details": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _outcomes[number]
    entry["title"] = title
    if report.when == "call" or report.failed:
        if report.failed:
            entry["passed"] = False
        for name, value in item.user_properties:
            if name == "measured" and value not in entry["details"]:
                entry["details"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        entry = _outcomes[number]
        status = "PASS" if entry["passed"] else "FAIL"
        detail = f"  [{'; '.join(entry['details'])}]" if entry["details"] else ""
        terminalreporter.write_line(f"criterion {number:2d} {status}  {entry['title']}{detail}")
