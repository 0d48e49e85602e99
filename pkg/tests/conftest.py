import time

import pytest

_results = {}
_started = time.perf_counter()
_took = 0.0
SUITE_BUDGET = 300  # seconds


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None and (rep.when == "call" or rep.failed or rep.skipped):
        number, title = mark.args
        prev = _results.get(number, (title, True))
        _results[number] = (title, prev[1] and rep.passed)
    return rep


def pytest_sessionfinish(session, exitstatus):
    global _took
    _took = time.perf_counter() - _started
    # the suite budget only applies to unfiltered runs
    if 9 in _results and not session.config.option.keyword and _took >= SUITE_BUDGET:
        _results[9] = (_results[9][0], False)
        if exitstatus == 0:
            session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    terminalreporter.write_line(f"suite time {_took:.0f}s (budget {SUITE_BUDGET}s)")
    for number in sorted(_results):
        title, ok = _results[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}")
