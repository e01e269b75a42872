import pytest

CRITERIA = {
    1: "gradient suite",
    2: "memory invariants on 1000 random instances",
    3: "hand-oracle equivalence",
    4: "superset identity",
    5: "memory beats baseline under illumination shift",
    6: "triplet loss separates items",
    7: "schedule audit",
    8: "ablation harness",
    9: "determinism and resumability",
}

_outcomes: dict = {}
_details: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion this test decides")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes.setdefault(n, []).append(rep.passed)
        for key, value in item.user_properties:
            if key == "detail":
                _details.setdefault(n, []).append(value)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n not in _outcomes:
            continue
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        extra = "; ".join(_details.get(n, []))
        terminalreporter.write_line(f"criterion {n} {status}: {name}" + (f" ({extra})" if extra else ""))
