from collections import defaultdict

import pytest

_results = defaultdict(list)
_titles = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    _titles[number] = title
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _results[number].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status = "PASS" if all(_results[number]) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {_titles[number]}")
