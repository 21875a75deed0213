"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end of the run."""

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        n, title = mark.args
        entry = _RESULTS.setdefault(n, {"title": title, "ok": True, "details": []})
        entry["ok"] &= rep.outcome == "passed"
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]
        if rep.outcome != "passed":
            msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else ""
            entry["details"].append(msg.splitlines()[0][:160] if msg else rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        r = _RESULTS[n]
        line = f"criterion {n:2d} {'PASS' if r['ok'] else 'FAIL'}  {r['title']}"
        if r["details"]:
            line += "  [" + "; ".join(r["details"]) + "]"
        terminalreporter.write_line(line)
