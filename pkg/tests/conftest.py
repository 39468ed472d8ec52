"""Per-criterion PASS/FAIL lines for the acceptance module."""
import pytest

_RESULTS: dict[str, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    crit = item.get_closest_marker("criterion")
    if crit is None:
        return
    key = crit.args[0]
    entry = _RESULTS.setdefault(key, {"title": crit.args[1], "ok": True, "seen": False,
                                      "notes": []})
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        entry["seen"] = True
        entry["ok"] &= rep.passed
        entry["notes"] += [str(v) for k, v in rep.user_properties if k == "measured"]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(_RESULTS, key=lambda k: (int(k.rstrip("abcdef")), k)):
        e = _RESULTS[key]
        if not e["seen"]:
            continue
        status = "PASS" if e["ok"] else "FAIL"
        notes = "; ".join(e["notes"])
        tr.write_line(f"criterion {key:<3} {status}  {e['title']}" + (f"  [{notes}]" if notes else ""))
