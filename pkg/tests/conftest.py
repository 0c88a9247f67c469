"""Collects outcomes of tests marked ``acceptance(number, title)`` and prints
one pass/fail line per criterion at the end of the run."""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = mark.args
    entry = _RESULTS.setdefault(number, {"title": title, "ok": True, "ran": False, "details": []})
    entry["ran"] = entry["ran"] or rep.when == "call"
    entry["ok"] = entry["ok"] and rep.passed
    entry["details"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        e = _RESULTS[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        detail = ("  [" + ", ".join(e["details"]) + "]") if e["details"] else ""
        terminalreporter.write_line(f"criterion {number}: {status}  {e['title']}{detail}")
