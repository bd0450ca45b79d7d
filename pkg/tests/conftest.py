"""Collects acceptance outcomes and prints one line per criterion."""

import pytest

_CRITERIA: dict = {}


def _entry(item):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return None
    number, title = mark.args
    return _CRITERIA.setdefault(number, {"title": title, "outcomes": [], "details": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _entry(item)
    if entry is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        if hasattr(rep, "wasxfail"):
            state = "xpass" if rep.passed else "xfail"
        else:
            state = rep.outcome
        entry["outcomes"].append((item.name, state))
        entry["details"].extend(v for k, v in item.user_properties if k == "measured")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        states = [s for _, s in entry["outcomes"]]
        ran = [s for s in states if s != "skipped"]
        if not ran:
            verdict = "SKIP"
        elif all(s == "passed" for s in ran):
            verdict = "PASS"
        else:
            verdict = "FAIL"
        line = f"criterion {number}: {verdict:4s}  {entry['title']}"
        notes = [f"{name}={s}" for name, s in entry["outcomes"] if s != "passed"]
        if notes:
            line += "  (" + ", ".join(notes) + ")"
        tr.write_line(line)
        for d in entry["details"]:
            tr.write_line(f"    {d}")
