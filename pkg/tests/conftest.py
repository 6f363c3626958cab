import pytest

CRITERIA = {
    1: "nested averaging equals the coordinate oracle",
    2: "worked example contribution counts 7/5/2",
    3: "analytic gradients match finite differences",
    4: "reductions to the plain network and plain FedAvg",
    5: "override configs load, validate and run",
    6: "IID smoke run accuracy",
    7: "non-IID ordering against the frozen-step ablation",
    8: "byte-identical metrics across runs and threads",
    9: "partitions and dataset file round-trips",
}

_outcomes: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    n = dict(report.user_properties).get("criterion")
    if n is None:
        return
    detail = dict(report.user_properties).get("detail", "")
    _outcomes.setdefault(n, []).append((report.nodeid, report.outcome == "passed", detail))


@pytest.fixture(autouse=True)
def _tag_criterion(request, record_property):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        record_property("criterion", marker.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            tr.write_line(f"criterion {n}: NOT RUN  {title}")
            continue
        ok = all(passed for _, passed, _ in results)
        details = "; ".join(d for _, _, d in results if d)
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{details}]" if details else ""))
