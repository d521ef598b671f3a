"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

CRITERIA = {
    1: "gradient checks (ops and full chains)",
    2: "projection exactness during training",
    3: "geometric label identity",
    4: "ratio reparameterization bounds",
    5: "scheme reduction lattice",
    6: "robust training vs standard training",
    7: "ablation grid ordering",
    8: "attack consistency",
    9: "run determinism",
}

_outcomes: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        notes = [v for k, v in item.user_properties if k == "note"]
        _outcomes.setdefault(marker.args[0], []).append((item.name, rep.passed, notes))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        runs = _outcomes.get(n)
        if runs is None:
            continue
        status = "PASS" if all(ok for _, ok, _ in runs) else "FAIL"
        tr.write_line(f"criterion {n} {status}: {CRITERIA[n]}")
        for name, ok, notes in runs:
            for note in notes:
                tr.write_line(f"    {name}: {note}")
