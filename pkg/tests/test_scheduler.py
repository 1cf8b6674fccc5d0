import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from replicator import scenarios
from replicator.catalog import generate_catalog
from replicator.core import Route, Site, TransferRecord, TransferStatus as S, build_plan
from replicator.errors import InvalidSpec, UnsplittablePath
from replicator.metrics import verify_replicas
from replicator.scheduler import (
    ActionLog,
    Alert,
    SchedulerPolicy,
    Skipped,
    Split,
    Submit,
    Terminate,
    Update,
    choose_source,
    handle_failed,
    ingest_new_paths,
    resume_point,
    run,
    split_path,
    step,
)
from replicator.simnet import FaultModel, SimFabric
from replicator.store import open_table

from oracles import audit_all, audit_in_flight_per_route, make_catalog, simulate

HUB, A, B = Site.SOURCE_HUB, Site.LCF_A, Site.LCF_B
BIG = 10**12


def quick_fabric(seed=0, faults=None, **kw):
    kw.setdefault("hub_scan_cost", 1.0)
    kw.setdefault("lcf_scan_cost", 0.5)
    return scenarios.fabric(seed=seed, faults=faults or FaultModel(), **kw)


def small_catalog(n=12, seed=0):
    return generate_catalog(scenarios.small_catalog_spec(n_paths=n, seed=seed))


def fresh(tmp_path, catalog, config=None):
    table = open_table(tmp_path / "journal.log", fsync=False)
    table.insert_many(build_plan(catalog), ts=0)
    return table, SimFabric(config or quick_fabric(), catalog)


def submits(actions, route=None):
    return [a for a in actions if isinstance(a, Submit) and (route is None or a.route == route)]


# -- step examples ---------------------------------------------------------

def test_all_succeeded_terminates(tmp_path):
    cat = small_catalog(3)
    table, fab = fresh(tmp_path, cat)
    for i, rec in enumerate(table.query()):
        table.upsert(rec.evolve(status=S.ACTIVE, uuid=f"u{i}"), 1)
        table.upsert(table.get(rec.dataset, rec.destination).evolve(status=S.SUCCEEDED), 2)
    assert step(table, fab, SchedulerPolicy(), 30_000, catalog=cat) == [Terminate()]


def test_lcf_a_paused_reroutes_to_b(tmp_path):
    cat = small_catalog(6)
    table, fab = fresh(tmp_path, cat)
    fab.set_maintenance(A, [(0, BIG)])
    actions = step(table, fab, SchedulerPolicy(), 0, catalog=cat)
    subs = submits(actions)
    assert [a.route for a in subs] == [Route(HUB, B)] * 2
    assert [a.path for a in subs] == cat.paths[:2]
    assert all(a.step == "c" for a in subs)


def test_route_limit_respected(tmp_path):
    cat = small_catalog(6)
    table, fab = fresh(tmp_path, cat)
    first = step(table, fab, SchedulerPolicy(), 0, catalog=cat)
    assert [a.route for a in submits(first)] == [Route(HUB, A)] * 2
    assert table.count([S.ACTIVE], source=HUB, destination=A) == 2
    fab.advance(1)
    again = step(table, fab, SchedulerPolicy(), 1, catalog=cat)
    assert submits(again, Route(HUB, A)) == []


def test_cascade_from_b(tmp_path):
    cat = small_catalog(1)
    p = cat.paths[0]
    table, fab = fresh(tmp_path, cat)
    u = fab.submit(HUB, B, p)
    fab.run_until_idle()
    rec = table.get(p, B)
    table.upsert(rec.evolve(status=S.ACTIVE, uuid=u), 0)
    table.upsert(table.get(p, B).evolve(status=S.SUCCEEDED, completed=fab.now), fab.now)
    actions = step(table, fab, SchedulerPolicy(), fab.now, catalog=cat)
    subs = submits(actions)
    assert [(a.route, a.path, a.step) for a in subs] == [(Route(B, A), p, "e")]
    assert table.get(p, A).source is B
    assert table.get(p, A).status is S.ACTIVE


def test_failed_row_is_requeued(tmp_path):
    cat = small_catalog(1)
    p = cat.paths[0]
    faults = FaultModel(persistent_fail_prob=1.0, persistent_autofix_after=60.0)
    table, fab = fresh(tmp_path, cat, quick_fabric(faults=faults))
    policy = SchedulerPolicy(retry_limit=5)
    step(table, fab, policy, 0, catalog=cat)
    fab.run_until_idle()
    actions = step(table, fab, policy, 30_000, catalog=cat)
    row = table.get(p, A)
    # (a) runs before (b) polls, so the failure is only seen now
    assert (row.status, row.failures, row.error) == (S.FAILED, 1, "UNREADABLE")
    assert any(isinstance(a, Update) and a.record.status is S.FAILED for a in actions)
    assert submits(actions) == []
    fab.advance(60_000)
    again = step(table, fab, policy, 60_000, catalog=cat)
    assert [a.route for a in submits(again)] == [Route(HUB, A)]
    assert table.get(p, A).status is S.ACTIVE
    assert table.get(p, A).failures == 1


# -- policy decisions ------------------------------------------------------

def test_choose_source(tmp_path):
    cat = small_catalog(2)
    table, _ = fresh(tmp_path, cat)
    p, q = cat.paths
    assert choose_source(p, table) is HUB
    table.upsert(table.get(p, B).evolve(status=S.ACTIVE, uuid="x"), 1)
    table.upsert(table.get(p, B).evolve(status=S.SUCCEEDED), 2)
    assert choose_source(p, table) is B
    assert choose_source(p, table, cascade_enabled=False) is HUB
    assert choose_source(q, table) is HUB


def record(failures, error="UNREADABLE"):
    p = make_catalog({"/r/p": [("f", 1)]}).paths[0]
    return TransferRecord(p, HUB, A, uuid="u", status=S.FAILED, failures=failures, error=error)


@pytest.mark.parametrize("failures,limit,expected", [
    (1, 5, Update), (4, 5, Update), (5, 5, Alert), (6, 5, Alert), (1, 0, Alert), (1, 1, Alert),
])
def test_handle_failed_boundaries(failures, limit, expected):
    action = handle_failed(record(failures), SchedulerPolicy(retry_limit=limit))
    assert isinstance(action, expected)
    if expected is Alert:
        assert action.record.status is S.PERMANENT_FAILED
    else:
        assert action.record.status is S.FAILED


def test_handle_failed_scan_oom():
    assert handle_failed(record(1, "SCAN_OOM"), SchedulerPolicy()) == Split(record(1).dataset)
    assert isinstance(handle_failed(record(1, "SCAN_OOM"), SchedulerPolicy(split_on_scan_oom=False)), Update)
    with pytest.raises(ValueError):
        handle_failed(record(1).evolve(status=S.ACTIVE), SchedulerPolicy())


def test_split_path():
    cat = make_catalog({"/r/p": [("r1/a", 10), ("r1/b/c", 20), ("r2/d", 30)], "/r/leaf": [("x", 5)]})
    parent, leaf = cat.paths
    kids = split_path(parent, cat)
    assert [k.text for k in kids] == ["/r/p/r1", "/r/p/r2"]
    assert sum(cat.manifest(k).bytes for k in kids) == cat.manifest(parent).bytes
    with pytest.raises(UnsplittablePath):
        split_path(leaf, cat)
    loose = make_catalog({"/r/q": [("top", 1), ("sub/f", 2)]})
    with pytest.raises(UnsplittablePath):
        split_path(loose.paths[0], loose)


def test_ingest(tmp_path):
    cat = small_catalog(4)
    table, _ = fresh(tmp_path, cat)
    assert ingest_new_paths(table, [cat.paths[0]], catalog=cat, ts=0) == 0
    new = [f"/css03_data/CMIP6/New/p{i}" for i in range(10)]
    assert ingest_new_paths(table, new, catalog=cat, ts=0) == 20
    assert len(table) == 2 * (4 + 10)
    assert ingest_new_paths(table, new, catalog=cat, ts=0) == 0
    assert all(table.get(p, d).status is S.NULL for p in new for d in (A, B))
    fab = SimFabric(quick_fabric(), cat)
    summary = run(table, fab, SchedulerPolicy(), catalog=cat)
    assert summary.terminated
    assert summary.statuses == {"SUCCEEDED": 28}
    assert verify_replicas(cat, fab.holdings(A), fab.holdings(B)).ok


def test_policy_config():
    assert SchedulerPolicy.from_config({"retry_limit": 2}).retry_limit == 2
    assert SchedulerPolicy.from_config(None) == SchedulerPolicy()
    assert SchedulerPolicy(poll_interval=0.5).poll_ms == 500
    with pytest.raises(InvalidSpec):
        SchedulerPolicy.from_config({"retries": 2})
    with pytest.raises(InvalidSpec):
        SchedulerPolicy(per_route_active_limit=0)
    with pytest.raises(InvalidSpec):
        SchedulerPolicy(retry_limit=-1)


# -- whole runs ------------------------------------------------------------

def windowed_fabric(seed, faults=None):
    return quick_fabric(
        seed=seed,
        faults=faults or FaultModel(transient_rate=1.0, transient_dispersion=0.3, transient_delay=20.0,
                                    file_corruption_prob=0.02),
        maintenance_a=[(15_000, 60_000), (120_000, 150_000)],
        maintenance_b=[(90_000, 100_000)],
    )


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 1000), limit=st.integers(1, 3))
def test_liveness_and_audits(tmp_path_factory, seed, limit):
    cat = small_catalog(15, seed=seed)
    sim = simulate(cat, windowed_fabric(seed), tmp_path_factory.mktemp("run"),
                   SchedulerPolicy(per_route_active_limit=limit))
    assert sim.summary.terminated
    assert set(sim.summary.statuses) == {"SUCCEEDED"}
    assert audit_all(sim, limit) == []
    assert verify_replicas(cat, sim.fabric.holdings(A), sim.fabric.holdings(B)).ok
    # never submit into or out of a site under maintenance
    for act in sim.actions:
        if act["action"] == "Submit":
            r = Route.parse(act["route"])
            assert not sim.fabric.endpoint_paused(r.source, act["ts"])
            assert not sim.fabric.endpoint_paused(r.destination, act["ts"])
    sim.table.close()


def test_summary_matches_table(tmp_path):
    cat = small_catalog(10)
    sim = simulate(cat, windowed_fabric(1), tmp_path)
    s = sim.summary
    rows = sim.table.query()
    assert sum(s.statuses.values()) == len(rows)
    for route, totals in s.routes.items():
        mine = [r for r in rows if str(r.route) == route and r.status is S.SUCCEEDED]
        assert totals["succeeded"] == len(mine)
        assert totals["bytes"] == sum(r.bytes_transferred for r in mine)
    assert s.last_completion == max(r.completed for r in rows)
    assert s.faults["total"] == sum(r.faults for r in rows)
    assert s.to_dict()["terminated"] is True


def test_without_cascade_everything_leaves_the_hub(tmp_path):
    cat = small_catalog(8)
    sim = simulate(cat, quick_fabric(), tmp_path, SchedulerPolicy(cascade_enabled=False))
    assert sim.summary.terminated
    assert all(r.source is HUB and r.status is S.SUCCEEDED for r in sim.table.query())
    assert audit_in_flight_per_route(sim.fabric.log, 2) == []


def test_retry_exhaustion_alerts(tmp_path):
    cat = small_catalog(3)
    faults = FaultModel(persistent_fail_prob=1.0, persistent_autofix_after=10**6)
    sim = simulate(cat, quick_fabric(faults=faults), tmp_path, SchedulerPolicy(retry_limit=2))
    assert sim.summary.terminated
    assert sim.summary.permanent_failed == 6
    alerts = [a for a in sim.actions if a["action"] == "Alert"]
    assert len(alerts) == 6
    assert all(r.failures == 2 and r.error == "UNREADABLE" for r in sim.table.query())


def test_hub_fallback_after_permanent_failure(tmp_path):
    cat = small_catalog(2)
    # LCF_A gives up after two attempts (t=0 and t=60 s); the hub copy heals at
    # about t=100 s, so the second fallback attempt to LCF_B goes through
    faults = FaultModel(persistent_fail_prob=1.0, persistent_autofix_after=100.0)
    sim = simulate(cat, quick_fabric(faults=faults), tmp_path, SchedulerPolicy(retry_limit=2))
    assert sim.summary.terminated
    assert all(sim.table.get(p, A).status is S.PERMANENT_FAILED for p in cat.paths)
    assert all(sim.table.get(p, B).status is S.SUCCEEDED for p in cat.paths)
    fallback = [a for a in sim.actions if a["action"] == "Submit" and a["fallback"]]
    assert {a["path"] for a in fallback} == {p.text for p in cat.paths}

    off = simulate(cat, quick_fabric(faults=faults), tmp_path / "off",
                   SchedulerPolicy(retry_limit=2, hub_fallback=False))
    assert all(off.table.get(p, B).status is S.NULL for p in cat.paths)
    assert off.summary.stalled and not off.summary.terminated


def test_scan_oom_split_end_to_end(tmp_path):
    spec = {"/r/big": [(f"c{c}/f{i}", 1000 + i) for c in range(4) for i in range(10)],
            "/r/small": [("f", 10)]}
    cat = make_catalog(spec)
    big = cat.paths[0]
    entries = cat.manifest(big).entries_count
    cap = entries // 2
    assert all(cat.manifest(c).entries_count <= cap for c in cat.children(big))
    sim = simulate(cat, quick_fabric(scan_entry_cap=cap), tmp_path)
    assert sim.summary.terminated
    assert sim.table.get(big, A) is None and sim.table.get(big, B) is None
    assert (big.text, A) in sim.table.retired
    kids = [c.text for c in cat.children(big)]
    for k in kids:
        for d in (A, B):
            assert sim.table.get(k, d).status is S.SUCCEEDED
    splits = [a for a in sim.actions if a["action"] == "Split"]
    assert splits and splits[0]["children"] == kids
    assert any(ev.kind == "SCAN_OOM" for ev in sim.fabric.log)
    assert verify_replicas(cat, sim.fabric.holdings(A), sim.fabric.holdings(B)).ok


def test_backend_outage_skips_step(tmp_path):
    cat = small_catalog(6)
    cfg = windowed_fabric(2)
    cfg.api_outages = [(20_000, 80_000)]
    sim = simulate(cat, cfg, tmp_path)
    assert sim.summary.terminated
    assert sim.summary.skipped_steps > 0
    skipped = [a["ts"] for a in sim.actions if a["action"] == "Skipped"]
    assert all(20_000 <= t < 80_000 for t in skipped)
    assert not any(a["action"] == "Submit" and 20_000 <= a["ts"] < 80_000 for a in sim.actions)
    before = {k: r for k, r in sim.table.rows.items()}
    sim.table.close()
    assert open_table(tmp_path / "journal.log", fsync=False).rows == before


def test_resume_matches_uninterrupted(tmp_path):
    cat = small_catalog(10)
    cfg = windowed_fabric(3)
    whole = simulate(cat, cfg, tmp_path / "whole")
    policy = SchedulerPolicy()
    part = simulate(cat, cfg, tmp_path / "part", until=70_000)
    assert not part.summary.terminated
    part.table.close()
    table = open_table(tmp_path / "part" / "journal.log", fsync=False)
    fab = SimFabric.replay(cfg, cat, table.submissions, table.last_step_ts)
    alog = ActionLog()
    summary = run(table, fab, policy, catalog=cat, start=resume_point(table, policy), action_log=alog)
    assert summary.terminated
    assert table.rows == whole.table.rows
    assert fab.log == whole.fabric.log
    assert part.actions + alog.records == whole.actions


def test_max_ticks_and_until(tmp_path):
    cat = small_catalog(6)
    table, fab = fresh(tmp_path, cat)
    s = run(table, fab, SchedulerPolicy(), catalog=cat, max_ticks=3)
    assert s.ticks == 3 and not s.terminated
    table2, fab2 = fresh(tmp_path / "b", cat)
    s2 = run(table2, fab2, SchedulerPolicy(), catalog=cat, until=45_000)
    assert s2.elapsed <= 45_000 and fab2.now == 45_000 and not s2.terminated


def test_step_is_atomic_in_the_journal(tmp_path):
    cat = small_catalog(4)
    table, fab = fresh(tmp_path, cat)
    step(table, fab, SchedulerPolicy(), 0, catalog=cat)
    lines = (tmp_path / "journal.log").read_text().splitlines()
    assert '"COMMIT","step"' in lines[-1]
    assert table.last_step_ts == 0
    assert [a for a in step(table, fab, SchedulerPolicy(), 30, catalog=cat) if isinstance(a, Skipped)] == []
