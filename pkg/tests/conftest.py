"""Per-criterion pass/fail lines for the acceptance suite.

Tests marked ``@pytest.mark.criterion(n)`` are tallied and one line per
criterion is printed in the terminal summary, so the verdict is visible
even under output capture.
"""
import pytest

_results: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _results.setdefault(n, []).append("SKIP" if rep.skipped else "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        outs = _results[n]
        verdict = "FAIL" if "FAIL" in outs else "SKIP" if all(o == "SKIP" for o in outs) else "PASS"
        terminalreporter.write_line(f"criterion {n}: {verdict}")
