"""Collects one pass/fail line per acceptance criterion and prints them after the run."""
import pytest

RESULTS = {}
DETAILS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion test")


@pytest.fixture
def detail(request):
    """Append free-form notes to the current criterion's summary line."""
    notes = DETAILS.setdefault(request.node.nodeid, [])
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        RESULTS[item.nodeid] = (mark.args[0], mark.args[1], rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (num, title, ok) in sorted(RESULTS.items(), key=lambda kv: kv[1][0]):
        notes = "; ".join(DETAILS.get(nodeid, []))
        line = f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({notes})" if notes else ""))
