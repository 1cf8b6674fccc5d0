import json
from html.parser import HTMLParser

import pytest

from replicator import scenarios
from replicator.catalog import generate_catalog
from replicator.core import Route, Site, TransferStatus as S, build_plan
from replicator.metrics import (
    TimeSeries,
    build_report,
    cumulative_bytes,
    emit_report,
    fault_histogram,
    flatten_numbers,
    instantaneous_rate,
    route_summary,
    verify_replicas,
)
from replicator.scheduler import SchedulerPolicy
from replicator.simnet import GiB, FabricConfig, FaultModel, SimFabric, SiteSpec
from replicator.store import open_table

from oracles import make_catalog, simulate

HUB, A, B = Site.SOURCE_HUB, Site.LCF_A, Site.LCF_B


def flat(cap=GiB):
    return FabricConfig(sites={s: SiteSpec(s, cap, cap) for s in Site})


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    cat = generate_catalog(scenarios.small_catalog_spec(n_paths=20, seed=4))
    cfg = scenarios.fabric(
        seed=4, hub_scan_cost=1.0, lcf_scan_cost=0.5,
        faults=FaultModel(transient_rate=1.0, transient_dispersion=0.3, transient_delay=10.0,
                          file_corruption_prob=0.05),
        maintenance_a=[(20_000, 50_000)],
    )
    cfg.metadata_recording_starts = 5_000
    return simulate(cat, cfg, tmp_path_factory.mktemp("run"))


def test_time_series_rules():
    with pytest.raises(ValueError):
        TimeSeries("x", [(1, 0.0), (1, 2.0)])
    ts = TimeSeries("x", [(10, 1.0), (20, 3.0)])
    assert ts.value_at(5) == 0.0
    assert ts.value_at(10) == 1.0
    assert ts.value_at(25) == 3.0
    assert ts.final == 3.0
    assert TimeSeries("e").final == 0.0


def test_cumulative_empty():
    assert cumulative_bytes([], A).points == []


def test_cumulative_against_scan_oracle(finished_run):
    log = finished_run.fabric.log
    total = finished_run.catalog.totals.bytes
    for d in (A, B):
        series = cumulative_bytes(log, d)
        values = [v for _, v in series.points]
        assert values == sorted(values)
        assert series.final == total
        succeeds = [ev for ev in log if ev.kind == "SUCCEED" and ev.payload["destination"] == d.value]
        for t in sorted({ev.time for ev in log})[::7] + [10**12]:
            brute = sum(ev.payload["bytes"] for ev in succeeds if ev.time <= t)
            assert series.value_at(t) == brute
        per_route = sum(s.delivered_bytes for s in route_summary(finished_run.table, log)
                        if s.route.endswith(d.value))
        assert per_route == series.final


def test_rate_idle_route():
    cat = make_catalog({"/r/p": [("f", GiB)]})
    fab = SimFabric(flat(), cat)
    fab.submit(HUB, A, cat.paths[0])
    fab.run_until_idle()
    s = instantaneous_rate(fab.log, "LCF_A->LCF_B", window=0.1)
    assert s.points and all(v == 0 for _, v in s.points)
    assert instantaneous_rate([], "LCF_A->LCF_B").points == []
    with pytest.raises(ValueError):
        instantaneous_rate(fab.log, "LCF_A->LCF_B", window=0)


def test_rate_constant_transfer():
    cat = make_catalog({"/r/p": [("f", 100 * GiB)]})
    fab = SimFabric(flat(), cat)
    fab.submit(HUB, A, cat.paths[0])
    fab.run_until_idle()
    s = instantaneous_rate(fab.log, Route(HUB, A), window=10)
    assert len(s.points) == 10
    for _, v in s.points:
        assert v == pytest.approx(GiB, rel=1e-9)


def test_rate_zero_during_maintenance():
    cat = make_catalog({"/r/p": [("f", 100 * GiB)]})
    fab = SimFabric(flat(), cat)
    fab.set_maintenance(A, [(30_000, 60_000)])
    fab.submit(HUB, A, cat.paths[0])
    fab.run_until_idle()
    s = instantaneous_rate(fab.log, Route(HUB, A), window=10)
    by_end = dict(s.points)
    assert by_end[40_000] == by_end[50_000] == by_end[60_000] == 0
    assert by_end[30_000] == pytest.approx(GiB)
    assert by_end[70_000] == pytest.approx(GiB)
    assert sum(v * 10 for _, v in s.points) == pytest.approx(100 * GiB)


def test_fault_histogram_recount(finished_run):
    table = finished_run.table
    hist = fault_histogram(table)
    rows = [r for r in table.query() if r.uuid and r.status in (S.SUCCEEDED, S.FAILED, S.PERMANENT_FAILED)
            and not r.missing_metadata]
    brute = {}
    for r in rows:
        brute[r.faults] = brute.get(r.faults, 0) + 1
    assert hist == brute
    assert sum(hist.values()) == len(rows)
    # table counters agree with the raw event log
    for r in table.query(S.SUCCEEDED):
        ev = next(e for e in finished_run.fabric.log if e.kind == "SUCCEED" and e.uuid == r.uuid)
        assert r.faults == ev.payload["faults"]
        assert r.faults == sum(1 for e in finished_run.fabric.log
                               if e.uuid == r.uuid and e.kind in ("FAULT", "FILE_RETRANSMIT"))


def test_fault_histogram_clean_run(tmp_path):
    cat = generate_catalog(scenarios.small_catalog_spec(n_paths=5))
    sim = simulate(cat, scenarios.fabric(hub_scan_cost=1.0), tmp_path)
    assert fault_histogram(sim.table) == {0: 10}


def test_route_summary_single_transfer(tmp_path):
    cat = make_catalog({"/r/p": [("f", GiB)]})
    t = open_table(tmp_path / "j.log", fsync=False)
    t.insert_many(build_plan(cat, [A]), ts=0)
    fab = SimFabric(flat(), cat)
    u = fab.submit(HUB, A, cat.paths[0])
    fab.run_until_idle()
    rep = fab.poll(u)
    rec = t.get(cat.paths[0], A)
    t.upsert(rec.evolve(status=S.ACTIVE, uuid=u), 0)
    t.upsert(t.get(cat.paths[0], A).evolve(status=S.SUCCEEDED, rate=rep.rate, completed=rep.completed,
                                           bytes_transferred=GiB), rep.completed)
    [stats] = route_summary(t, fab.log)
    assert stats.route == "SOURCE_HUB->LCF_A"
    assert stats.mean_rate == pytest.approx(1.0)
    assert stats.transfers == 1
    assert stats.delivered_bytes == GiB


def test_route_summary_missing_metadata(finished_run):
    table = finished_run.table
    stats = route_summary(table, finished_run.fabric.log)
    assert sum(s.missing_metadata for s in stats) > 0
    for s in stats:
        rows = [r for r in table.query() if str(r.route) == s.route and r.uuid]
        assert s.transfers == len(rows)
        meta = [r for r in rows if not r.missing_metadata]
        assert s.missing_metadata == len(rows) - len(meta)
        assert s.faults_mean == pytest.approx(sum(r.faults for r in meta) / len(meta))
        assert s.faults_max >= s.faults_mean
    assert sum(s.transfers for s in stats) == len(finished_run.table.submissions)


def test_verify_identical_and_flipped():
    cat = make_catalog({"/r/p": [("a", 1), ("b", 2)], "/r/q": [("c", 3)]})
    fab = SimFabric(flat(), cat)
    hub = fab.holdings(HUB)
    rep = verify_replicas(cat, hub, dict(hub))
    assert rep.ok and rep.paths_checked == 2
    bad = dict(hub)
    size, ck = bad["/r/p/b"]
    bad["/r/p/b"] = (size, ck ^ 1)
    rep = verify_replicas(cat, hub, bad)
    assert len(rep.mismatches) == 1
    m = rep.mismatches[0]
    assert (m.path, m.entry) == ("/r/p", "b")
    assert m.lcf_a == m.source != m.lcf_b
    missing = {k: v for k, v in hub.items() if k != "/r/q/c"}
    assert [x.entry for x in verify_replicas(cat, missing, hub).mismatches] == ["c"]
    extra = {**hub, "/r/q/zz": (1, 1)}
    assert [x.entry for x in verify_replicas(cat, hub, extra).mismatches] == ["zz"]


def test_verify_after_fault_injected_run(finished_run):
    fab = finished_run.fabric
    assert any(ev.kind == "FILE_RETRANSMIT" for ev in fab.log)
    assert verify_replicas(finished_run.catalog, fab.holdings(A), fab.holdings(B)).ok


def test_report_quarter_complete(tmp_path):
    cat = make_catalog({f"/r/p{i}": [("f", 1000)] for i in range(4)})
    t = open_table(tmp_path / "j.log", fsync=False)
    t.insert_many(build_plan(cat), ts=0)
    p = cat.paths[0]
    for d in (A, B):
        t.upsert(t.get(p, d).evolve(status=S.ACTIVE, uuid=f"u{d.value}"), 1)
        t.upsert(t.get(p, d).evolve(status=S.SUCCEEDED, completed=2, bytes_transferred=1000), 2)
    rep = build_report(cat, t, [], now=2)
    for d in ("LCF_A", "LCF_B"):
        assert rep["destinations"][d]["fraction"] == 0.25
        assert rep["destinations"][d]["remaining_bytes"] == 3000
    assert len(rep["recent"]) == 2


def test_report_empty_run(tmp_path):
    cat = make_catalog({"/r/p": [("f", 10)]})
    t = open_table(tmp_path / "j.log", fsync=False)
    t.insert_many(build_plan(cat), ts=0)
    rep = build_report(cat, t, [])
    assert rep["time_ms"] == 0
    assert all(d["fraction"] == 0 and d["completed_bytes"] == 0 for d in rep["destinations"].values())
    assert rep["routes"] == [] and rep["active"] == [] and rep["faults"] == {}
    assert "<html>" in emit_report(rep, format="html")
    assert json.loads(emit_report(rep)) == rep


class _Cells(HTMLParser):
    def __init__(self):
        super().__init__()
        self.cells, self._field, self.data = {}, None, None
        self._in_script = False

    def handle_starttag(self, tag, attrs):
        a = dict(attrs)
        if tag == "td" and "data-field" in a:
            self._field = a["data-field"]
            self.cells[self._field] = ""
        if tag == "script" and a.get("id") == "report-data":
            self._in_script = True

    def handle_endtag(self, tag):
        if tag == "td":
            self._field = None
        if tag == "script":
            self._in_script = False

    def handle_data(self, data):
        if self._field:
            self.cells[self._field] += data
        if self._in_script:
            self.data = (self.data or "") + data


def test_structured_and_html_agree(finished_run):
    rep = build_report(finished_run.catalog, finished_run.table, finished_run.fabric.log,
                       now=finished_run.fabric.now, window=5)
    structured = json.loads(emit_report(rep))
    parser = _Cells()
    parser.feed(emit_report(rep, format="html"))
    numbers = flatten_numbers(structured)
    assert len(parser.cells) > 20
    for key, text in parser.cells.items():
        assert float(text) == numbers[key], key
    assert json.loads(parser.data) == structured


def test_report_in_progress_has_active_rows(tmp_path):
    cat = generate_catalog(scenarios.small_catalog_spec(n_paths=6))
    sim = simulate(cat, scenarios.fabric(hub_scan_cost=1.0), tmp_path, SchedulerPolicy(), until=3_000)
    rep = build_report(cat, sim.table, sim.fabric.log, now=sim.fabric.now)
    assert len(rep["active"]) == 2
    assert all(a["route"] == "SOURCE_HUB->LCF_A" for a in rep["active"])
    with pytest.raises(ValueError):
        emit_report(rep, format="pdf")
