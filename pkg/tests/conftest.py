import time

import pytest

SUITE_BUDGET_S = 15 * 60
_start = time.perf_counter()
_results: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, text): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    n, text = mark.args
    entry = _results.setdefault(n, [text, True, False])
    if rep.when == "call":
        entry[2] = True
    if rep.failed:
        entry[1] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    elapsed = time.perf_counter() - _start
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_results):
        text, ok, ran = _results[n]
        status = "PASS" if ok and ran else ("FAIL" if ran or not ok else "SKIP")
        tr.write_line(f"[{status}] {n:>2}. {text}")
    ok = elapsed < SUITE_BUDGET_S
    tr.write_line(f"[{'PASS' if ok else 'FAIL'}] 10. full suite wall clock {elapsed:.0f} s < {SUITE_BUDGET_S} s")


def pytest_sessionfinish(session, exitstatus):
    if _results and time.perf_counter() - _start >= SUITE_BUDGET_S and exitstatus == 0:
        session.exitstatus = 1
