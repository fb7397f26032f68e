"""Prints one pass/fail line per acceptance criterion at the end of the run."""

import pytest

_RESULTS: dict[int, list[tuple[str, str, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        detail = dict(item.user_properties).get("detail", "")
        if rep.outcome == "skipped" and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2].removeprefix("Skipped: ")
        _RESULTS.setdefault(mark.args[0], []).append((mark.args[1], status, detail))


def _overall(states: set[str]) -> str:
    if "FAIL" in states:
        return "FAIL"
    if len(states) == 1:
        return states.pop()
    return "PARTIAL"


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        parts = _RESULTS[n]
        overall = _overall({s for _, s, _ in parts})
        detail = "; ".join(f"{name}: {s} {d}".rstrip() for name, s, d in parts)
        terminalreporter.write_line(f"criterion {n:>2}: {overall:<7} {detail}")
