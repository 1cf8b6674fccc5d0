"""The replication control loop.

Each tick runs the following sub-steps in order, inside one journal
transaction tagged ``step``:

(a) start hub transfers to LCF_A while that route has spare slots;
(b) poll every in-flight row and record status changes;
(c) start hub transfers to LCF_B, but only while LCF_A is paused;
(d) copy paths held at LCF_A to LCF_B;
(e) copy paths held at LCF_B to LCF_A;
(f) terminate once no row is pending or in flight.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import yaml

from .catalog import Catalog, DatasetPath, parse_drs_path
from .core import (
    DESTINATIONS,
    IN_FLIGHT,
    NON_TERMINAL,
    PENDING,
    Route,
    Site,
    TransferRecord,
    TransferStatus,
    other_lcf,
)
from .errors import BackendUnavailable, InvalidSpec, UnsplittablePath
from .simnet import MS, TransferStatusReport, ceil_ms
from .store import TrackingTable

log = logging.getLogger(__name__)
S = TransferStatus


class Backend(Protocol):
    now: int

    def submit(self, source: Site, destination: Site, path: DatasetPath, uuid: str | None = None) -> str: ...
    def poll(self, uuid: str) -> TransferStatusReport: ...
    def advance(self, until: int) -> list: ...
    def endpoint_paused(self, site: Site, t: int | None = None) -> bool: ...
    def next_event_time(self) -> int | None: ...


@dataclass
class SchedulerPolicy:
    per_route_active_limit: int = 2
    retry_limit: int = 5
    split_on_scan_oom: bool = True
    poll_interval: float = 30.0
    cascade_enabled: bool = True
    # Send a path to LCF_B from the hub when its LCF_A row gave up for good;
    # otherwise such a path could never reach LCF_B.
    hub_fallback: bool = True

    def __post_init__(self):
        if self.per_route_active_limit < 1:
            raise InvalidSpec("per_route_active_limit must be at least 1")
        if self.retry_limit < 0:
            raise InvalidSpec("retry_limit must be non-negative")
        if not self.poll_interval > 0:
            raise InvalidSpec("poll_interval must be positive")

    @property
    def poll_ms(self) -> int:
        return ceil_ms(self.poll_interval)

    @classmethod
    def from_config(cls, obj: dict | None) -> SchedulerPolicy:
        obj = dict(obj or {})
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidSpec(f"unknown policy keys: {', '.join(sorted(unknown))}")
        return cls(**obj)

    @classmethod
    def load(cls, src: str | os.PathLike) -> SchedulerPolicy:
        return cls.from_config(yaml.safe_load(Path(src).read_text(encoding="utf-8")))

    def to_config(self) -> dict:
        return asdict(self)


# -- actions ---------------------------------------------------------------

@dataclass(frozen=True)
class Submit:
    route: Route
    path: DatasetPath
    uuid: str
    step: str
    fallback: bool = False


@dataclass(frozen=True)
class Update:
    record: TransferRecord
    old_status: TransferStatus | None = None


@dataclass(frozen=True)
class Split:
    path: DatasetPath
    children: tuple[DatasetPath, ...] = ()
    destinations: tuple[Site, ...] = ()


@dataclass(frozen=True)
class Alert:
    record: TransferRecord
    message: str


@dataclass(frozen=True)
class Terminate:
    pass


@dataclass(frozen=True)
class Skipped:
    reason: str


Action = Submit | Update | Split | Alert | Terminate | Skipped


def action_to_dict(ts: int, action: Action) -> dict:
    kind = type(action).__name__
    d: dict = {"ts": ts, "action": kind}
    if isinstance(action, Submit):
        d.update(route=str(action.route), path=action.path.text, uuid=action.uuid, step=action.step,
                 fallback=action.fallback)
    elif isinstance(action, Update):
        r = action.record
        d.update(path=r.dataset.text, destination=r.destination.value, source=r.source.value,
                 old=action.old_status.value if action.old_status else None, status=r.status.value,
                 uuid=r.uuid, faults=r.faults, error=r.error)
    elif isinstance(action, Split):
        d.update(path=action.path.text, children=[c.text for c in action.children],
                 destinations=[s.value for s in action.destinations])
    elif isinstance(action, Alert):
        d.update(path=action.record.dataset.text, destination=action.record.destination.value,
                 message=action.message)
    elif isinstance(action, Skipped):
        d.update(reason=action.reason)
    return d


class ActionLog:
    """Line-delimited JSON log of every scheduler action."""

    def __init__(self, location: str | os.PathLike | None = None):
        self.location = Path(location) if location is not None else None
        self.records: list[dict] = []
        self._fh = open(self.location, "a", encoding="utf-8") if self.location else None

    def truncate_after(self, ts: int | None) -> None:
        """Drop entries newer than ``ts`` (used on resume after a crash)."""
        if self.location is None or not self.location.exists():
            return
        keep = []
        for line in self.location.read_text(encoding="utf-8").splitlines():
            try:
                rec = json.loads(line)
            except ValueError:
                continue
            if ts is not None and rec["ts"] <= ts:
                keep.append(line)
        self._fh.close()
        self.location.write_text("".join(k + "\n" for k in keep), encoding="utf-8")
        self._fh = open(self.location, "a", encoding="utf-8")

    def write(self, ts: int, actions: Iterable[Action]) -> None:
        lines = []
        for a in actions:
            d = action_to_dict(ts, a)
            self.records.append(d)
            lines.append(json.dumps(d, separators=(",", ":")))
        if self._fh and lines:
            self._fh.write("\n".join(lines) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


# -- policy decisions ------------------------------------------------------

def choose_source(path: DatasetPath, table: TrackingTable, cascade_enabled: bool = True) -> Site:
    """Where the next copy of ``path`` should come from."""
    if cascade_enabled:
        for site, rec in table.rows_for(path).items():
            if rec.status is S.SUCCEEDED:
                return site
    return Site.SOURCE_HUB


def hub_eligible(rec: TransferRecord, table: TrackingTable, cascade_enabled: bool = True) -> bool:
    """Whether a pending row may be served from the hub.

    With cascading on, a path that is held at (or on its way to) the other
    LCF waits for the LCF-to-LCF copy instead.
    """
    if rec.status not in PENDING:
        return False
    if not cascade_enabled:
        return True
    other = table.get(rec.dataset, other_lcf(rec.destination))
    return other is None or other.status not in IN_FLIGHT | {S.SUCCEEDED}


def handle_failed(record: TransferRecord, policy: SchedulerPolicy) -> Action:
    """Decide what follows a failed attempt (``record.failures`` already counts it)."""
    if record.status is not S.FAILED:
        raise ValueError(f"record is {record.status}, expected FAILED")
    if record.error == "SCAN_OOM" and policy.split_on_scan_oom:
        return Split(record.dataset)
    if record.failures < policy.retry_limit:
        return Update(record, S.FAILED)
    final = record.evolve(status=S.PERMANENT_FAILED)
    return Alert(final, f"{record.dataset} to {record.destination} failed {record.failures} times "
                        f"(last error {record.error}); manual intervention needed")


def split_path(path: DatasetPath, catalog: Catalog) -> list[DatasetPath]:
    """Immediate subdirectories of ``path``; together they cover every file below it."""
    children = catalog.children(path)
    if not children or catalog.has_loose_files(path):
        raise UnsplittablePath(f"{path} has no subdirectories to split into")
    return children


def ingest_new_paths(table: TrackingTable, paths: Iterable[DatasetPath | str], *,
                     catalog: Catalog | None = None, flavor: str = "generic",
                     destinations: Iterable[Site] = DESTINATIONS, ts=None) -> int:
    """Add NULL rows for paths not yet tracked; returns the number of rows added."""
    parsed = []
    for p in paths:
        parsed.append(parse_drs_path(p, flavor) if isinstance(p, str) else p)
    destinations = list(destinations)
    new = []
    seen = set()
    for p in parsed:
        if p.text in seen:
            continue
        seen.add(p.text)
        for d in destinations:
            if table.get(p, d) is None and (p.text, d) not in table.retired:
                new.append(TransferRecord(dataset=p, source=Site.SOURCE_HUB, destination=d))
    if not new:
        return 0
    if catalog is not None:
        catalog.extend([p for p in parsed if catalog.root_of(p) is None])
    with table.transaction("ingest", ts):
        for rec in new:
            table.upsert(rec, ts)
    return len(new)


# -- the step --------------------------------------------------------------

class _Step:
    def __init__(self, table: TrackingTable, backend: Backend, policy: SchedulerPolicy, now: int,
                 catalog: Catalog | None):
        self.table = table
        self.backend = backend
        self.policy = policy
        self.now = now
        self.catalog = catalog
        self.actions: list[Action] = []

    def write(self, rec: TransferRecord) -> None:
        old = self.table.get(rec.dataset, rec.destination)
        self.table.upsert(rec, self.now)
        self.actions.append(Update(rec, old.status if old else None))

    def paused(self, site: Site) -> bool:
        return self.backend.endpoint_paused(site, self.now)

    def in_flight(self, route: Route) -> int:
        return self.table.count(IN_FLIGHT, source=route.source, destination=route.destination)

    def submit(self, rec: TransferRecord, source: Site, step: str, fallback: bool = False) -> None:
        uuid = self.backend.submit(source, rec.destination, rec.dataset)
        self.write(rec.evolve(
            source=source, uuid=uuid, requested=self.now, completed=None, status=S.ACTIVE,
            directories=0, files=0, rate=0.0, faults=0, bytes_transferred=0, error=None,
            missing_metadata=False,
        ))
        self.actions.append(Submit(Route(source, rec.destination), rec.dataset, uuid, step, fallback))

    def hub_fill(self, dest: Site, step: str, *, only_fallback: bool = False) -> None:
        route = Route(Site.SOURCE_HUB, dest)
        if self.paused(Site.SOURCE_HUB) or self.paused(dest):
            return
        room = self.policy.per_route_active_limit - self.in_flight(route)
        if room <= 0:
            return
        other_dest = other_lcf(dest)
        if only_fallback and not self.table.count([S.PERMANENT_FAILED], destination=other_dest):
            return
        cascade = self.policy.cascade_enabled
        picked = []
        for rec in self.table.iter_status(dest, [S.NULL, S.FAILED]):
            if only_fallback:
                other = self.table.get(rec.dataset, other_dest)
                if other is None or other.status is not S.PERMANENT_FAILED:
                    continue
            elif not hub_eligible(rec, self.table, cascade):
                continue
            picked.append(rec)
            if len(picked) == room:
                break
        for rec in picked:
            self.submit(rec, Site.SOURCE_HUB, step, fallback=only_fallback)

    def poll_all(self) -> None:
        for rec in self.table.query(IN_FLIGHT):
            report = self.backend.poll(rec.uuid)
            self.apply_report(rec, report)

    def apply_report(self, rec: TransferRecord, rep: TransferStatusReport) -> None:
        status = rep.status
        if status is S.QUEUED or status == rec.status:
            return
        if status is S.ACTIVE or status is S.PAUSED:
            self.write(rec.evolve(status=status))
            return
        if rec.status is S.PAUSED:
            rec = rec.evolve(status=S.ACTIVE)
            self.write(rec)
        counters = dict(
            completed=rep.completed, directories=rep.directories, files=rep.files, rate=rep.rate,
            faults=rep.faults, missing_metadata=rep.missing_metadata,
        )
        if status is S.SUCCEEDED:
            payload = rep.payload_bytes if rep.payload_bytes is not None else rep.bytes_transferred
            self.write(rec.evolve(status=S.SUCCEEDED, bytes_transferred=payload, error=None, **counters))
            return
        failed = rec.evolve(status=S.FAILED, bytes_transferred=rep.bytes_transferred,
                            failures=rec.failures + 1, error=rep.error, **counters)
        self.write(failed)
        self.on_failed(failed)

    def on_failed(self, rec: TransferRecord) -> None:
        action = handle_failed(rec, self.policy)
        if isinstance(action, Split):
            try:
                self.split(rec.dataset)
                return
            except UnsplittablePath as exc:
                log.warning("%s", exc)
                action = handle_failed(rec.evolve(error="SCAN_OOM_UNSPLITTABLE"), self.policy)
        if isinstance(action, Alert):
            self.write(action.record)
            self.actions.append(action)
        # a plain requeue leaves the FAILED row eligible for the next submission

    def split(self, path: DatasetPath) -> None:
        if self.catalog is None:
            raise UnsplittablePath("no catalog available to split against")
        rows = self.table.rows_for(path)
        if any(r.status is S.SUCCEEDED for r in rows.values()):
            raise UnsplittablePath(f"{path} already delivered somewhere; not splitting")
        children = split_path(path, self.catalog)
        dests = tuple(d for d, r in rows.items() if r.status in PENDING)
        for d in dests:
            self.table.retire(path, d, "split", self.now)
            for c in children:
                if self.table.get(c, d) is None:
                    self.write(TransferRecord(dataset=c, source=Site.SOURCE_HUB, destination=d))
        self.actions.append(Split(path, tuple(children), dests))

    def lcf_a_paused(self) -> bool:
        if self.paused(Site.LCF_A):
            return True
        return bool(self.table.count([S.PAUSED], destination=Site.LCF_A))

    def cascade(self, held: Site, missing: Site, step: str) -> None:
        route = Route(held, missing)
        if self.paused(held) or self.paused(missing):
            return
        room = self.policy.per_route_active_limit - self.in_flight(route)
        for path in list(self.table.held_not_pending(held, missing)):
            if room <= 0:
                break
            self.submit(self.table.get(path, missing), held, step)
            room -= 1

    def terminated(self) -> bool:
        return self.table.count(NON_TERMINAL) == 0


def step(table: TrackingTable, backend: Backend, policy: SchedulerPolicy, now: int, *,
         catalog: Catalog | None = None) -> list[Action]:
    """Run one pass of the control loop at sim-time ``now`` (ms)."""
    st = _Step(table, backend, policy, now, catalog)
    table.now = now
    with table.transaction("step", now):
        try:
            st.hub_fill(Site.LCF_A, "a")
            st.poll_all()
            if not policy.cascade_enabled or st.lcf_a_paused():
                st.hub_fill(Site.LCF_B, "c")
            if policy.hub_fallback:
                st.hub_fill(Site.LCF_B, "c", only_fallback=True)
            if policy.cascade_enabled:
                st.cascade(Site.LCF_A, Site.LCF_B, "d")
                st.cascade(Site.LCF_B, Site.LCF_A, "e")
        except BackendUnavailable as exc:
            # keep what was already done so the table matches the backend
            st.actions.append(Skipped(str(exc)))
            return st.actions
    if st.terminated():
        st.actions.append(Terminate())
    return st.actions


# -- the loop --------------------------------------------------------------

@dataclass
class RunSummary:
    elapsed: int
    last_completion: int | None
    terminated: bool
    stalled: bool
    ticks: int
    skipped_steps: int
    routes: dict[str, dict] = field(default_factory=dict)
    statuses: dict[str, int] = field(default_factory=dict)
    faults: dict = field(default_factory=dict)

    @property
    def permanent_failed(self) -> int:
        return self.statuses.get(S.PERMANENT_FAILED.value, 0)

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(table: TrackingTable, *, elapsed: int, terminated: bool, stalled: bool = False,
              ticks: int = 0, skipped: int = 0) -> RunSummary:
    routes: dict[str, dict] = {}
    statuses: dict[str, int] = {}
    faults = []
    last = None
    for rec in table.query():
        statuses[rec.status.value] = statuses.get(rec.status.value, 0) + 1
        if rec.uuid is None:
            continue
        r = routes.setdefault(str(rec.route), {"transfers": 0, "succeeded": 0, "bytes": 0})
        r["transfers"] += 1
        if rec.status is S.SUCCEEDED:
            r["succeeded"] += 1
            r["bytes"] += rec.bytes_transferred
            last = rec.completed if last is None else max(last, rec.completed)
        if not rec.missing_metadata and rec.status in (S.SUCCEEDED, S.FAILED, S.PERMANENT_FAILED):
            faults.append(rec.faults)
    fault_stats = {
        "transfers": len(faults),
        "total": sum(faults),
        "mean": sum(faults) / len(faults) if faults else 0.0,
        "max": max(faults, default=0),
        "with_faults": sum(1 for f in faults if f),
    }
    return RunSummary(elapsed, last, terminated, stalled, ticks, skipped, routes, statuses, fault_stats)


def _next_tick(t: int, poll: int, next_event: int | None) -> int | None:
    if next_event is None:
        return None
    target = max(t + poll, next_event)
    return -(-target // poll) * poll


def run(table: TrackingTable, backend: Backend, policy: SchedulerPolicy, *,
        catalog: Catalog | None = None, start: int = 0, until: int | None = None,
        action_log: ActionLog | None = None, max_ticks: int | None = None) -> RunSummary:
    """Loop ``step`` and ``backend.advance`` until termination (or ``until`` ms).

    Ticks lie on a grid of ``poll_interval``.  After a tick with no actions the
    loop jumps straight to the first grid tick at or after the backend's next
    event, which is exactly what polling every tick would have done.
    """
    poll = policy.poll_ms
    t = start
    ticks = skipped = 0
    terminated = stalled = False
    while until is None or t <= until:
        backend.advance(t)
        actions = step(table, backend, policy, t, catalog=catalog)
        ticks += 1
        if action_log is not None:
            action_log.write(t, actions)
        if any(isinstance(a, Skipped) for a in actions):
            skipped += 1
        if any(isinstance(a, Terminate) for a in actions):
            terminated = True
            break
        if max_ticks is not None and ticks >= max_ticks:
            break
        if actions:
            t += poll
            continue
        nxt = _next_tick(t, poll, backend.next_event_time())
        if nxt is None:
            stalled = True
            log.error("no pending backend events and nothing to do at t=%d ms; stopping", t)
            break
        t = nxt
    else:
        backend.advance(until)
    elapsed = t if until is None or t <= until else until
    return summarize(table, elapsed=elapsed, terminated=terminated, stalled=stalled, ticks=ticks,
                     skipped=skipped)


def resume_point(table: TrackingTable, policy: SchedulerPolicy) -> int:
    """First tick to run after reopening a journal."""
    last = table.last_step_ts
    return 0 if last is None else int(last) + policy.poll_ms


def rebuild_backend(table: TrackingTable, factory, until: int | None = None):
    """Re-create a simulated backend from the journal's submission history.

    ``factory(submissions, until)`` must return a backend advanced to ``until``.
    """
    until = int(table.last_step_ts or 0) if until is None else until
    subs = [s for s in table.submissions if isinstance(s.ts, int) and s.ts <= until]
    return factory(subs, until)


__all__ = [
    "Action", "ActionLog", "Alert", "Backend", "RunSummary", "SchedulerPolicy", "Skipped", "Split",
    "Submit", "Terminate", "Update", "MS", "choose_source", "handle_failed", "hub_eligible",
    "ingest_new_paths", "rebuild_backend", "resume_point", "run", "split_path", "step", "summarize",
]
