"""Deterministic discrete-event simulation of the transfer fabric.

The engine keeps an integer millisecond clock.  Between events every running
transfer moves bytes at a constant rate, so progress is exact arithmetic and
the next event time can be computed directly.  Rates follow an equal split of
each shared resource (source egress, destination ingress, route capacity):

    r = min(egress(src) / n_src, ingress(dst) / n_dst, route_cap / n_route)

where the ``n`` count ACTIVE, unpaused transfers on that resource, including
ones that are still scanning or stalled after a fault.
"""

from __future__ import annotations

import bisect
import json
import math
import os
import uuid as uuidlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import yaml

from .catalog import Catalog, DatasetPath, FileEntry, Manifest
from .core import Route, Site, TransferStatus
from .errors import BackendUnavailable, InvalidSpec, SourceMissingData, UnknownPath, UnknownTransfer

GiB = 2**30
MS = 1000

EVENT_KINDS = (
    "SUBMIT", "SCAN_START", "SCAN_DONE", "SCAN_OOM", "BYTES_PROGRESS", "FAULT",
    "FILE_RETRANSMIT", "PAUSE", "RESUME", "SUCCEED", "FAIL",
)
_UUID_NS = uuidlib.UUID("6f1c2a8e-3b4d-5e6f-8a9b-0c1d2e3f4a5b")


def ceil_ms(seconds: float) -> int:
    """Seconds to whole milliseconds, rounding up but ignoring float dust."""
    x = seconds * MS
    return max(0, math.ceil(x - (1e-6 + 1e-13 * abs(x))))


def parse_rate(value) -> float:
    """Accept B/s numbers or strings such as ``"1.5 GiB/s"``.

    ``GB/s`` is read as 2**30 B/s, the convention used for transfer rates in
    this domain; ``MB/s`` likewise means 2**20 B/s.
    """
    if isinstance(value, (int, float)):
        return float(value)
    text = str(value).strip().replace(" ", "")
    units = {"GiB/s": GiB, "GB/s": GiB, "MiB/s": 2**20, "MB/s": 2**20, "B/s": 1}
    for suffix, mult in units.items():
        if text.endswith(suffix):
            text, scale = text[: -len(suffix)], mult
            break
    else:
        scale = 1
    try:
        return float(text) * scale
    except ValueError:
        raise InvalidSpec(f"bad rate {value!r}") from None


def _windows_from_config(obj, *, field_name: str) -> list[tuple[int, int]]:
    """Windows in seconds, either explicit pairs or a recurring block."""
    if obj is None:
        return []
    if isinstance(obj, dict):
        every, duration = float(obj["every"]), float(obj["duration"])
        first, count = float(obj.get("first", 0.0)), int(obj["count"])
        if every <= 0 or duration <= 0 or duration > every:
            raise InvalidSpec(f"{field_name}: need 0 < duration <= every")
        return [(ceil_ms(first + i * every), ceil_ms(first + i * every + duration)) for i in range(count)]
    return [(ceil_ms(float(a)), ceil_ms(float(b))) for a, b in obj]


def _check_windows(windows: list[tuple[int, int]], what: str) -> None:
    prev_end = None
    for start, end in windows:
        if not start < end:
            raise InvalidSpec(f"{what}: empty window [{start}, {end})")
        if prev_end is not None and start < prev_end:
            raise InvalidSpec(f"{what}: windows overlap or are unsorted")
        prev_end = end


def _in_windows(windows: list[tuple[int, int]], t: int) -> bool:
    i = bisect.bisect_right(windows, (t, math.inf)) - 1
    return i >= 0 and windows[i][0] <= t < windows[i][1]


# -- configuration ---------------------------------------------------------

@dataclass
class SiteSpec:
    """Capacities and behaviour of one endpoint.  Windows are ``[start, end)`` in ms."""

    site: Site
    egress_cap: float
    ingress_cap: float
    scan_cost: float = 0.0
    scan_entry_cap: int | None = None
    maintenance: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.site = Site(self.site)
        if not (self.egress_cap > 0 and self.ingress_cap > 0):
            raise InvalidSpec(f"{self.site}: capacities must be positive")
        if self.scan_cost < 0:
            raise InvalidSpec(f"{self.site}: scan_cost must be non-negative")
        if self.scan_entry_cap is not None and self.scan_entry_cap < 1:
            raise InvalidSpec(f"{self.site}: scan_entry_cap must be positive")
        self.maintenance = [(int(a), int(b)) for a, b in self.maintenance]
        _check_windows(self.maintenance, f"{self.site} maintenance")


@dataclass
class RouteCap:
    """Aggregate capacity of a directed route, optionally with a per-transfer ceiling."""

    route: Route
    cap: float
    per_transfer_cap: float | None = None

    def __post_init__(self):
        if not self.cap > 0:
            raise InvalidSpec(f"{self.route}: cap must be positive")
        if self.per_transfer_cap is not None and not self.per_transfer_cap > 0:
            raise InvalidSpec(f"{self.route}: per_transfer_cap must be positive")


@dataclass
class FaultModel:
    """Fault injection parameters.

    ``transient_dispersion`` is the gamma shape of a Poisson-gamma mixture for
    the transient fault count; ``None`` gives a plain Poisson count.  Small
    shapes give many clean transfers and a long tail of troubled ones while
    keeping the mean at ``transient_rate``.
    """

    transient_rate: float = 0.0
    transient_dispersion: float | None = None
    transient_delay: float = 0.0
    file_corruption_prob: float = 0.0
    persistent_fail_prob: float = 0.0
    persistent_autofix_after: float = 86400.0

    def __post_init__(self):
        for name in ("file_corruption_prob", "persistent_fail_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidSpec(f"{name} must lie in [0, 1]")
        for name in ("transient_rate", "transient_delay", "persistent_autofix_after"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be non-negative")
        if self.transient_dispersion is not None and not self.transient_dispersion > 0:
            raise InvalidSpec("transient_dispersion must be positive")

    def draw_transient(self, rng: np.random.Generator) -> int:
        lam = self.transient_rate
        if lam == 0:
            return 0
        if self.transient_dispersion is not None:
            k = self.transient_dispersion
            lam = rng.gamma(k, lam / k)
        return int(rng.poisson(lam))


@dataclass
class FabricConfig:
    sites: dict[Site, SiteSpec]
    routes: dict[Route, RouteCap] = field(default_factory=dict)
    faults: FaultModel = field(default_factory=FaultModel)
    seed: int = 0
    metadata_recording_starts: int = 0
    api_outages: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        missing = [s for s in Site if s not in self.sites]
        if missing:
            raise InvalidSpec(f"fabric config lacks sites: {', '.join(map(str, missing))}")
        _check_windows(self.api_outages, "api_outages")

    @classmethod
    def from_config(cls, obj: dict) -> FabricConfig:
        """Build from a plain mapping (parsed YAML/JSON); times in seconds, rates in B/s."""
        if not isinstance(obj, dict):
            raise InvalidSpec("fabric config must be a mapping")
        try:
            sites = {}
            for name, s in (obj.get("sites") or {}).items():
                site = Site(name)
                sites[site] = SiteSpec(
                    site=site,
                    egress_cap=parse_rate(s["egress_cap"]),
                    ingress_cap=parse_rate(s["ingress_cap"]),
                    scan_cost=float(s.get("scan_cost", 0.0)),
                    scan_entry_cap=s.get("scan_entry_cap"),
                    maintenance=_windows_from_config(s.get("maintenance"), field_name=f"{name}.maintenance"),
                )
            routes = {}
            for name, r in (obj.get("routes") or {}).items():
                route = Route.parse(name)
                if not isinstance(r, dict):
                    r = {"cap": r}
                ptc = r.get("per_transfer_cap")
                routes[route] = RouteCap(route, parse_rate(r["cap"]), parse_rate(ptc) if ptc is not None else None)
            faults = FaultModel(**(obj.get("faults") or {}))
            return cls(
                sites=sites,
                routes=routes,
                faults=faults,
                seed=int(obj.get("seed", 0)),
                metadata_recording_starts=ceil_ms(float(obj.get("metadata_recording_starts", 0))),
                api_outages=_windows_from_config(obj.get("api_outages"), field_name="api_outages"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidSpec):
                raise
            raise InvalidSpec(f"bad fabric config: {exc}") from None

    def to_config(self) -> dict:
        return {
            "seed": self.seed,
            "sites": {
                s.value: {
                    "egress_cap": spec.egress_cap,
                    "ingress_cap": spec.ingress_cap,
                    "scan_cost": spec.scan_cost,
                    "scan_entry_cap": spec.scan_entry_cap,
                    "maintenance": [[a / MS, b / MS] for a, b in spec.maintenance],
                }
                for s, spec in self.sites.items()
            },
            "routes": {
                str(r): {"cap": rc.cap, "per_transfer_cap": rc.per_transfer_cap}
                for r, rc in self.routes.items()
            },
            "faults": asdict(self.faults),
            "metadata_recording_starts": self.metadata_recording_starts / MS,
            "api_outages": [[a / MS, b / MS] for a, b in self.api_outages],
        }

    @classmethod
    def load(cls, src: str | os.PathLike) -> FabricConfig:
        return cls.from_config(yaml.safe_load(Path(src).read_text(encoding="utf-8")))


# -- reports and events ----------------------------------------------------

@dataclass(frozen=True)
class TransferStatusReport:
    uuid: str
    status: TransferStatus
    directories: int
    files: int
    bytes_transferred: int
    faults: int
    rate: float
    paused_reason: str | None = None
    requested: int | None = None
    completed: int | None = None
    error: str | None = None
    missing_metadata: bool = False
    payload_bytes: int | None = None


@dataclass(frozen=True)
class EventLogEntry:
    time: int
    kind: str
    uuid: str
    route: str
    payload: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"time": self.time, "kind": self.kind, "uuid": self.uuid, "route": self.route,
             "payload": self.payload},
            separators=(",", ":"), sort_keys=False,
        )

    @classmethod
    def from_json(cls, line: str) -> EventLogEntry:
        d = json.loads(line)
        return cls(d["time"], d["kind"], d["uuid"], d["route"], d.get("payload") or {})


def write_event_log(events: Iterable[EventLogEntry], dest: str | os.PathLike) -> None:
    with open(dest, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(ev.to_json() + "\n")


def read_event_log(src: str | os.PathLike) -> list[EventLogEntry]:
    with open(src, encoding="utf-8") as fh:
        return [EventLogEntry.from_json(line) for line in fh if line.strip()]


# -- engine ----------------------------------------------------------------

_QUEUED, _SCAN, _STALL, _FLOW, _DONE = "queued", "scan", "stall", "flow", "done"
_FLIP = (1 << 64) - 1


class _Transfer:
    __slots__ = (
        "uuid", "index", "source", "dest", "path", "manifest", "route", "requested",
        "first_active", "completed", "status", "phase", "paused", "phase_end", "phase_left",
        "bytes", "ckpt", "rate", "seg_start", "seg_bytes", "milestones", "mpos", "mtime",
        "payload", "stream_total", "cum_sizes", "corrupted", "faults", "dirs_seen",
        "error", "missing_metadata", "fault_count",
    )

    def __init__(self, **kw):
        for k in self.__slots__:
            setattr(self, k, None)
        for k, v in kw.items():
            setattr(self, k, v)

    def next_milestone(self) -> float | None:
        return self.milestones[self.mpos][0] if self.mpos < len(self.milestones) else None


class SimFabric:
    """Simulated transfer backend.

    ``submit``, ``poll`` and ``advance`` are to be called by a single caller.
    Every transfer draws its randomness from its own generator seeded with
    ``(config.seed, submission index)``, so results depend only on the config
    and the submission sequence.
    """

    def __init__(self, config: FabricConfig, catalog: Catalog, *, check_invariants: bool = False):
        self.config = config
        self.catalog = catalog
        self.now = 0
        self.log: list[EventLogEntry] = []
        self.check_invariants = check_invariants
        self.capacity_violations: list[str] = []
        self._transfers: dict[str, _Transfer] = {}
        self._live: dict[str, _Transfer] = {}
        self._counter = 0
        self._held: dict[Site, dict[str, tuple[int, int]]] = {Site.LCF_A: {}, Site.LCF_B: {}}
        self._complete: dict[Site, set[str]] = {Site.LCF_A: set(), Site.LCF_B: set()}
        self._broken: dict[tuple[Site, str], int] = {}
        self._windows = {s: list(spec.maintenance) for s, spec in config.sites.items()}
        self._rebuild_boundaries()

    # -- maintenance -------------------------------------------------------

    def _rebuild_boundaries(self, extra: int | None = None) -> None:
        times = {t for ws in self._windows.values() for w in ws for t in w if t >= self.now}
        if extra is not None:
            times.add(extra)
        self._boundaries = sorted(times)
        self._bpos = 0

    def set_maintenance(self, site: Site, windows: Iterable[tuple[int, int]]) -> None:
        """Replace the maintenance windows of ``site`` (ms, ``[start, end)``)."""
        windows = [(int(a), int(b)) for a, b in windows]
        _check_windows(windows, f"{site} maintenance")
        self._windows[Site(site)] = windows
        self._rebuild_boundaries(extra=self.now)

    def endpoint_paused(self, site: Site, t: int | None = None) -> bool:
        return _in_windows(self._windows[Site(site)], self.now if t is None else t)

    def maintenance_windows(self, site: Site) -> list[tuple[int, int]]:
        return list(self._windows[Site(site)])

    def _pause_reason(self, tr: _Transfer, t: int) -> str | None:
        sites = [s for s in (tr.source, tr.dest) if _in_windows(self._windows[s], t)]
        return ",".join(f"maintenance:{s.value}" for s in sites) or None

    # -- submission --------------------------------------------------------

    def _check_available(self) -> None:
        if _in_windows(self.config.api_outages, self.now):
            raise BackendUnavailable(f"backend unavailable at t={self.now} ms")

    def source_manifest(self, source: Site, path: DatasetPath) -> Manifest:
        if self.catalog.root_of(path) is None:
            raise UnknownPath(str(path))
        m = self.catalog.manifest(path)
        if source is Site.SOURCE_HUB:
            return m
        held = self._held[source]
        for e in m.entries:
            if held.get(f"{path.text}/{e.name}") != (e.size, e.checksum):
                raise SourceMissingData(f"{path} is not held at {source}")
        return m

    def holds(self, site: Site, path: DatasetPath) -> bool:
        try:
            self.source_manifest(site, path)
        except (SourceMissingData, UnknownPath):
            return False
        return True

    def submit(self, source: Site, destination: Site, path: DatasetPath, uuid: str | None = None) -> str:
        """Request a recursive transfer of ``path``; returns the transfer uuid."""
        source, destination = Site(source), Site(destination)
        if source is destination:
            raise ValueError("source and destination must differ")
        self._check_available()
        m = self.source_manifest(source, path)
        index = self._counter
        expected = str(uuidlib.uuid5(_UUID_NS, f"{self.config.seed}/{index}"))
        if uuid is not None and uuid != expected:
            raise ValueError(f"uuid {uuid} does not match submission #{index} ({expected})")
        self._counter += 1
        rng = np.random.default_rng([self.config.seed, index])
        faults = self.config.faults
        corrupted = np.flatnonzero(rng.random(m.files) < faults.file_corruption_prob).tolist() \
            if faults.file_corruption_prob > 0 else []
        retrans = sum(m.entries[i].size for i in corrupted)
        stream_total = m.bytes + retrans
        n_faults = faults.draw_transient(rng)
        offsets = sorted(rng.uniform(0, stream_total, n_faults).tolist()) if n_faults else []
        milestones = [(off, 0, "fault") for off in offsets]
        if corrupted:
            milestones.append((float(m.bytes), 1, "verify"))
        milestones.append((float(stream_total), 2, "end"))
        milestones.sort()
        sizes = np.cumsum([e.size for e in m.entries]).tolist()
        tr = _Transfer(
            uuid=expected, index=index, source=source, dest=destination, path=path, manifest=m,
            route=Route(source, destination), requested=self.now, status=TransferStatus.QUEUED,
            phase=_QUEUED, paused=False, bytes=0.0, ckpt=self.now, rate=0.0, seg_start=self.now,
            seg_bytes=0.0, milestones=milestones, mpos=0, mtime=None, payload=m.bytes,
            stream_total=stream_total, cum_sizes=sizes, corrupted=corrupted, faults=0,
            dirs_seen=0, missing_metadata=self.now < self.config.metadata_recording_starts,
        )
        self._transfers[tr.uuid] = tr
        self._live[tr.uuid] = tr
        self._emit(self.now, "SUBMIT", tr, path=path.text, files=m.files, bytes=m.bytes)
        return tr.uuid

    # -- polling -----------------------------------------------------------

    def _bytes_now(self, tr: _Transfer) -> float:
        b = tr.bytes
        if tr.phase == _FLOW and tr.rate > 0 and self.now > tr.ckpt:
            b += tr.rate * (self.now - tr.ckpt) / MS
            nxt = tr.next_milestone()
            if nxt is not None:
                b = min(b, nxt)
        return b

    def poll(self, uuid: str) -> TransferStatusReport:
        tr = self._transfers.get(uuid)
        if tr is None:
            raise UnknownTransfer(uuid)
        self._check_available()
        done = tr.phase == _DONE
        b = self._bytes_now(tr)
        if done and tr.status is TransferStatus.SUCCEEDED:
            files = tr.manifest.files
        else:
            files = bisect.bisect_right(tr.cum_sizes, min(b, tr.payload) + 1e-6)
        end = tr.completed if done else self.now
        elapsed = (end - tr.first_active) / MS if tr.first_active is not None else 0.0
        nbytes = int(round(b))
        return TransferStatusReport(
            uuid=tr.uuid,
            status=tr.status,
            directories=tr.dirs_seen,
            files=files,
            bytes_transferred=nbytes,
            faults=tr.faults,
            rate=(b / elapsed) if elapsed > 0 else 0.0,
            paused_reason=self._pause_reason(tr, self.now) if tr.paused else None,
            requested=tr.requested,
            completed=tr.completed,
            error=tr.error,
            missing_metadata=tr.missing_metadata,
            payload_bytes=tr.payload,
        )

    def transfers(self) -> list[str]:
        return list(self._transfers)

    def active_count(self, route: Route | None = None) -> int:
        return sum(1 for tr in self._live.values() if route is None or tr.route == route)

    # -- holdings ----------------------------------------------------------

    def holdings(self, site: Site) -> dict[str, tuple[int, int]]:
        """File-level holdings ``{"<path>/<file>": (size, checksum)}`` of a site."""
        site = Site(site)
        if site is Site.SOURCE_HUB:
            return {
                f"{p.text}/{e.name}": (e.size, e.checksum)
                for p in self.catalog.paths for e in self.catalog.tree[p]
            }
        return dict(self._held[site])

    def completed_paths(self, site: Site) -> set[str]:
        return set(self._complete[Site(site)])

    # -- event log ---------------------------------------------------------

    def _emit(self, t: int, kind: str, tr: _Transfer, **payload) -> None:
        self.log.append(EventLogEntry(t, kind, tr.uuid, str(tr.route), payload))

    def export_log(self, dest: str | os.PathLike) -> None:
        write_event_log(self.log, dest)

    # -- engine ------------------------------------------------------------

    def next_event_time(self) -> int | None:
        best = None
        for tr in self._live.values():
            t = self._due_time(tr)
            if t is not None and (best is None or t < best):
                best = t
        if self._bpos < len(self._boundaries):
            b = self._boundaries[self._bpos]
            if best is None or b < best:
                best = b
        return best

    @staticmethod
    def _due_time(tr: _Transfer) -> int | None:
        if tr.phase == _QUEUED:
            return tr.requested
        if tr.paused:
            return None
        if tr.phase in (_SCAN, _STALL):
            return tr.phase_end
        if tr.phase == _FLOW and tr.rate > 0:
            return tr.mtime
        return None

    def advance(self, until: int) -> list[EventLogEntry]:
        """Process every event with time <= ``until``; returns the new log entries."""
        until = int(until)
        if until < self.now:
            raise ValueError(f"cannot advance backwards from {self.now} to {until}")
        first = len(self.log)
        while True:
            t = self.next_event_time()
            if t is None or t > until:
                break
            self._process(t)
        self.now = until
        return self.log[first:]

    def run_until_idle(self, limit: int | None = None) -> int:
        """Advance until no events remain (or ``limit``); returns the final time."""
        while True:
            t = self.next_event_time()
            if t is None or (limit is not None and t > limit):
                return self.now
            self.advance(t)

    def _checkpoint(self, t: int) -> None:
        for tr in self._live.values():
            if tr.phase == _FLOW and tr.rate > 0 and t > tr.ckpt:
                b = tr.bytes + tr.rate * (t - tr.ckpt) / MS
                nxt = tr.next_milestone()
                tr.bytes = min(b, nxt) if nxt is not None else b
            tr.ckpt = t

    def _process(self, t: int) -> None:
        self._checkpoint(t)
        self.now = t
        while True:
            due = [tr for tr in self._live.values() if (dt := self._due_time(tr)) is not None and dt <= t]
            if due:
                due.sort(key=lambda tr: tr.uuid)
                for tr in due:
                    if tr.uuid in self._live and (dt := self._due_time(tr)) is not None and dt <= t:
                        self._handle(tr, t)
                continue
            if self._bpos < len(self._boundaries) and self._boundaries[self._bpos] <= t:
                while self._bpos < len(self._boundaries) and self._boundaries[self._bpos] <= t:
                    self._bpos += 1
                self._apply_pauses(t)
                continue
            self._reallocate(t)
            if not any((dt := self._due_time(tr)) is not None and dt <= t for tr in self._live.values()):
                break

    def _handle(self, tr: _Transfer, t: int) -> None:
        if tr.phase == _QUEUED:
            self._start(tr, t)
        elif tr.phase == _SCAN:
            self._scan_done(tr, t)
        elif tr.phase == _STALL:
            tr.phase = _FLOW
            tr.mtime = None
        elif tr.phase == _FLOW:
            self._milestone(tr, t)

    def _start(self, tr: _Transfer, t: int) -> None:
        tr.status = TransferStatus.ACTIVE
        tr.first_active = t
        spec = self.config.sites[tr.source]
        entries = tr.manifest.entries_count
        tr.phase = _SCAN
        tr.phase_end = t + ceil_ms(spec.scan_cost * entries / 1000.0)
        self._emit(t, "SCAN_START", tr, entries=entries)
        if self._pause_reason(tr, t):
            self._pause(tr, t)

    def _scan_done(self, tr: _Transfer, t: int) -> None:
        spec = self.config.sites[tr.source]
        entries = tr.manifest.entries_count
        if spec.scan_entry_cap is not None and entries > spec.scan_entry_cap:
            self._emit(t, "SCAN_OOM", tr, entries=entries, cap=spec.scan_entry_cap)
            self._fail(tr, t, "SCAN_OOM")
            return
        fm = self.config.faults
        key = (tr.source, tr.path.text)
        fixed_at = self._broken.get(key)
        if fixed_at is None and fm.persistent_fail_prob > 0:
            rng = np.random.default_rng([self.config.seed, 0xBAD, tr.index])
            if rng.random() < fm.persistent_fail_prob:
                fixed_at = self._broken[key] = t + ceil_ms(fm.persistent_autofix_after)
        if fixed_at is not None and t < fixed_at:
            self._fail(tr, t, "UNREADABLE")
            return
        tr.dirs_seen = tr.manifest.directories
        self._emit(t, "SCAN_DONE", tr, directories=tr.manifest.directories, files=tr.manifest.files)
        tr.phase = _FLOW
        tr.mtime = None

    def _milestone(self, tr: _Transfer, t: int) -> None:
        pos, _, kind = tr.milestones[tr.mpos]
        tr.mpos += 1
        tr.bytes = pos
        tr.ckpt = t
        self._set_rate(tr, 0.0, t)
        tr.mtime = None
        if kind == "fault":
            tr.faults += 1
            self._emit(t, "FAULT", tr, offset=pos, faults=tr.faults)
            tr.phase = _STALL
            tr.phase_end = t + ceil_ms(self.config.faults.transient_delay)
        elif kind == "verify":
            held = self._held[tr.dest]
            bad = set(tr.corrupted)
            for i, e in enumerate(tr.manifest.entries):
                held[f"{tr.path.text}/{e.name}"] = (e.size, e.checksum ^ _FLIP if i in bad else e.checksum)
            for i in tr.corrupted:
                e = tr.manifest.entries[i]
                tr.faults += 1
                self._emit(t, "FILE_RETRANSMIT", tr, file=e.name, bytes=e.size, faults=tr.faults)
        else:
            self._succeed(tr, t)

    def _succeed(self, tr: _Transfer, t: int) -> None:
        held = self._held[tr.dest]
        for e in tr.manifest.entries:
            held[f"{tr.path.text}/{e.name}"] = (e.size, e.checksum)
        self._complete[tr.dest].add(tr.path.text)
        tr.status = TransferStatus.SUCCEEDED
        tr.completed = t
        tr.phase = _DONE
        tr.bytes = float(tr.stream_total)
        del self._live[tr.uuid]
        elapsed = (t - tr.first_active) / MS
        self._emit(
            t, "SUCCEED", tr, bytes=tr.payload, stream_bytes=tr.stream_total, files=tr.manifest.files,
            directories=tr.manifest.directories, faults=tr.faults,
            rate=tr.stream_total / elapsed if elapsed > 0 else 0.0, path=tr.path.text,
            destination=tr.dest.value, missing_metadata=tr.missing_metadata,
        )

    def _fail(self, tr: _Transfer, t: int, error: str) -> None:
        self._set_rate(tr, 0.0, t)
        tr.status = TransferStatus.FAILED
        tr.completed = t
        tr.phase = _DONE
        tr.error = error
        if error == "SCAN_OOM" or error == "UNREADABLE":
            tr.faults += 1
        del self._live[tr.uuid]
        self._emit(t, "FAIL", tr, error=error, faults=tr.faults, path=tr.path.text)

    def _pause(self, tr: _Transfer, t: int) -> None:
        self._set_rate(tr, 0.0, t)
        if tr.phase in (_SCAN, _STALL):
            tr.phase_left = tr.phase_end - t
        tr.paused = True
        tr.status = TransferStatus.PAUSED
        self._emit(t, "PAUSE", tr, reason=self._pause_reason(tr, t))

    def _resume(self, tr: _Transfer, t: int) -> None:
        if tr.phase in (_SCAN, _STALL):
            tr.phase_end = t + tr.phase_left
        tr.paused = False
        tr.status = TransferStatus.ACTIVE
        tr.ckpt = t
        tr.mtime = None
        self._emit(t, "RESUME", tr)

    def _apply_pauses(self, t: int) -> None:
        for tr in sorted(self._live.values(), key=lambda x: x.uuid):
            if tr.phase == _QUEUED:
                continue
            should = self._pause_reason(tr, t) is not None
            if should and not tr.paused:
                self._pause(tr, t)
            elif not should and tr.paused:
                self._resume(tr, t)

    def _set_rate(self, tr: _Transfer, rate: float, t: int) -> None:
        if rate == tr.rate:
            return
        if tr.rate > 0 and t > tr.seg_start and tr.bytes > tr.seg_bytes:
            self._emit(t, "BYTES_PROGRESS", tr, since=tr.seg_start, bytes=tr.bytes - tr.seg_bytes)
        tr.rate = rate
        tr.seg_start = t
        tr.seg_bytes = tr.bytes
        tr.ckpt = t
        tr.mtime = None

    def _reallocate(self, t: int) -> None:
        running = [tr for tr in self._live.values() if tr.phase != _QUEUED and not tr.paused]
        n_src: dict[Site, int] = {}
        n_dst: dict[Site, int] = {}
        n_route: dict[Route, int] = {}
        for tr in running:
            n_src[tr.source] = n_src.get(tr.source, 0) + 1
            n_dst[tr.dest] = n_dst.get(tr.dest, 0) + 1
            n_route[tr.route] = n_route.get(tr.route, 0) + 1
        sites = self.config.sites
        for tr in sorted(running, key=lambda x: x.uuid):
            if tr.phase != _FLOW:
                continue
            r = min(sites[tr.source].egress_cap / n_src[tr.source], sites[tr.dest].ingress_cap / n_dst[tr.dest])
            rc = self.config.routes.get(tr.route)
            if rc is not None:
                r = min(r, rc.cap / n_route[tr.route])
                if rc.per_transfer_cap is not None:
                    r = min(r, rc.per_transfer_cap)
            self._set_rate(tr, r, t)
            if tr.mtime is None:
                nxt = tr.next_milestone()
                tr.mtime = t + ceil_ms((nxt - tr.bytes) / r)
        if self.check_invariants:
            self._audit_capacity(t)

    def _audit_capacity(self, t: int) -> None:
        out: dict[Site, float] = {}
        inn: dict[Site, float] = {}
        per_route: dict[Route, float] = {}
        for tr in self._live.values():
            if tr.rate > 0:
                if tr.paused or tr.phase != _FLOW:
                    self.capacity_violations.append(f"t={t}: {tr.uuid} moves bytes while not flowing")
                out[tr.source] = out.get(tr.source, 0.0) + tr.rate
                inn[tr.dest] = inn.get(tr.dest, 0.0) + tr.rate
                per_route[tr.route] = per_route.get(tr.route, 0.0) + tr.rate
        tol = 1 + 1e-9
        for s, v in out.items():
            if v > self.config.sites[s].egress_cap * tol:
                self.capacity_violations.append(f"t={t}: egress of {s} at {v}")
        for s, v in inn.items():
            if v > self.config.sites[s].ingress_cap * tol:
                self.capacity_violations.append(f"t={t}: ingress of {s} at {v}")
        for r, v in per_route.items():
            rc = self.config.routes.get(r)
            if rc is not None and v > rc.cap * tol:
                self.capacity_violations.append(f"t={t}: route {r} at {v}")

    # -- rebuild -----------------------------------------------------------

    @classmethod
    def replay(cls, config: FabricConfig, catalog: Catalog, submissions: Iterable, until: int,
               **kwargs) -> SimFabric:
        """Rebuild a fabric by re-issuing recorded submissions, then advance to ``until``.

        ``submissions`` are ``(ts, uuid, source, destination, dataset)`` tuples in
        submission order.
        """
        fab = cls(config, catalog, **kwargs)
        for ts, uuid, source, dest, dataset in submissions:
            if ts > until:
                break
            if ts > fab.now:
                fab.advance(ts)
            fab.submit(source, dest, dataset, uuid=uuid)
        fab.advance(until)
        return fab


def iter_segments(log: Iterable[EventLogEntry]) -> Iterator[tuple[str, str, int, int, float]]:
    """``(uuid, route, start, end, bytes)`` for every BYTES_PROGRESS record."""
    for ev in log:
        if ev.kind == "BYTES_PROGRESS":
            yield ev.uuid, ev.route, ev.payload["since"], ev.time, ev.payload["bytes"]


def manifest_entries(holdings: dict[str, tuple[int, int]], path: DatasetPath) -> list[FileEntry]:
    """Entries of ``holdings`` below ``path``, as a sorted manifest-style list."""
    prefix = path.text + "/"
    return sorted(
        FileEntry(k[len(prefix):], size, checksum)
        for k, (size, checksum) in holdings.items() if k.startswith(prefix)
    )
