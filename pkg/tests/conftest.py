"""Collects one pass/fail line per acceptance criterion and prints them at the end."""

import pytest

_RESULTS: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    number, title = mark.args
    _, states = _RESULTS.setdefault(number, (title, []))
    if report.when == "call" or report.failed or report.skipped:
        states.append("pass" if report.passed else "skip" if report.skipped else "fail")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, states = _RESULTS[number]
        verdict = "FAIL" if "fail" in states else "SKIP" if "skip" in states else "PASS"
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {title}")
