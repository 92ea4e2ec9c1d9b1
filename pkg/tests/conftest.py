"""Acceptance summary: one PASS/FAIL line per criterion at the end of the run."""

import pytest

_RESULTS: dict[str, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    entry = _RESULTS.setdefault(name, {"status": None, "detail": ""})
    details = [v for k, v in item.user_properties if k == "detail"]
    if details:
        entry["detail"] = "; ".join(map(str, details))
    if rep.failed:
        entry["status"] = "FAIL"
        if not entry["detail"]:
            entry["detail"] = str(rep.longrepr).strip().splitlines()[-1][:160]
    elif rep.skipped and entry["status"] is None:
        entry["status"] = "SKIP"
    elif rep.when == "call" and rep.passed and entry["status"] is None:
        warn = any(k == "warn" and v for k, v in item.user_properties)
        entry["status"] = "WARN" if warn else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, entry in _RESULTS.items():
        status = entry["status"] or "FAIL"
        line = f"{status:<4}  {name}"
        if entry["detail"]:
            line += f"  ({entry['detail']})"
        terminalreporter.write_line(line)
