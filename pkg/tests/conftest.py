import pytest

from mflpr.config import Config
from mflpr.search import build_reference_index
from mflpr.synth import Layout, SensorModel, plan_benchmark, render_scan, scan_seed

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, title = marker.args
    entry = _criteria.setdefault(num, {"title": title, "ok": True, "ran": False, "detail": ""})
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        entry["ran"] = True
        entry["ok"] = entry["ok"] and rep.outcome == "passed"
        detail = dict(item.user_properties).get("detail")
        if detail:
            entry["detail"] = detail


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        e = _criteria[num]
        status = "PASS" if e["ok"] and e["ran"] else ("SKIP" if not e["ran"] else "FAIL")
        line = f"{status} criterion {num}: {e['title']}"
        if e["detail"]:
            line += f" ({e['detail']})"
        terminalreporter.write_line(line)


# ----------------------------------------------------------------------------
# shared synthetic data
# ----------------------------------------------------------------------------

SMALL_LAYOUT = Layout(n_ref_scans=20, ref_scan_spacing=2.0, lane_length=60.0, n_queries=0)


@pytest.fixture(scope="session")
def small_bench():
    return plan_benchmark(11, SMALL_LAYOUT)


@pytest.fixture(scope="session")
def small_scans(small_bench):
    sensor = SensorModel()
    return [(i, render_scan(small_bench.world, p, sensor, scan_seed(11, "ref", i)), p)
            for i, p in enumerate(small_bench.ref_poses)]


@pytest.fixture(scope="session")
def small_index(small_scans):
    return build_reference_index(small_scans, Config())
