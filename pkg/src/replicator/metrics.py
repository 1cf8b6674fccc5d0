"""Analyses over the event log and the tracking table, and the static report."""

from __future__ import annotations

import html
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

from .catalog import Catalog
from .core import DESTINATIONS, IN_FLIGHT, Route, Site, TransferRecord, TransferStatus
from .simnet import GiB, MS, EventLogEntry
from .store import TrackingTable

S = TransferStatus
DEFAULT_WINDOW = 600.0
_FINISHED = (S.SUCCEEDED, S.FAILED, S.PERMANENT_FAILED)


@dataclass
class TimeSeries:
    label: str
    points: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        for (a, _), (b, _) in zip(self.points, self.points[1:]):
            if not a < b:
                raise ValueError(f"{self.label}: times must increase strictly")

    def value_at(self, t: int) -> float:
        """Step-function value at ``t`` (0 before the first point)."""
        v = 0.0
        for pt, pv in self.points:
            if pt > t:
                break
            v = pv
        return v

    @property
    def final(self) -> float:
        return self.points[-1][1] if self.points else 0.0


@dataclass
class RouteStats:
    route: str
    mean_rate: float  # 2**30 B/s
    transfers: int
    missing_metadata: int
    faults_mean: float
    faults_max: int
    mean_rate_bps: float = 0.0
    succeeded: int = 0
    delivered_bytes: int = 0


@dataclass
class Mismatch:
    path: str
    entry: str
    source: tuple[int, int] | None
    lcf_a: tuple[int, int] | None
    lcf_b: tuple[int, int] | None


@dataclass
class VerificationReport:
    paths_checked: int
    mismatches: list[Mismatch] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches


def _destination_of(ev: EventLogEntry) -> str:
    return ev.payload.get("destination") or ev.route.split("->", 1)[1]


# -- time series -----------------------------------------------------------

def cumulative_bytes(log: Iterable[EventLogEntry], destination: Site | str) -> TimeSeries:
    """Payload bytes of completed transfers into ``destination`` over time."""
    dest = Site(destination).value
    points: list[tuple[int, float]] = []
    total = 0
    for ev in log:
        if ev.kind != "SUCCEED" or _destination_of(ev) != dest:
            continue
        total += ev.payload["bytes"]
        if points and points[-1][0] == ev.time:
            points[-1] = (ev.time, total)
        else:
            points.append((ev.time, total))
    return TimeSeries(f"cumulative bytes {dest}", points)


def instantaneous_rate(log: Iterable[EventLogEntry], route: Route | str, window: float = DEFAULT_WINDOW,
                       *, start: int = 0, end: int | None = None) -> TimeSeries:
    """Mean B/s over ``(t - window, t]`` on ``route``, sampled every ``window`` seconds."""
    if not window > 0:
        raise ValueError("window must be positive")
    log = list(log)
    if not log:
        return TimeSeries(f"rate {route}", [])
    w = int(round(window * MS))
    end = max(ev.time for ev in log) if end is None else end
    n = max(1, math.ceil((end - start) / w))
    buckets = [0.0] * n
    name = str(route)
    for ev in log:
        if ev.kind != "BYTES_PROGRESS" or ev.route != name:
            continue
        a, b, nbytes = ev.payload["since"], ev.time, ev.payload["bytes"]
        if b <= a:
            continue
        per_ms = nbytes / (b - a)
        i = max(0, (a - start) // w)
        while i < n:
            lo = start + i * w
            hi = lo + w
            overlap = min(b, hi) - max(a, lo)
            if overlap > 0:
                buckets[i] += per_ms * overlap
            if hi >= b:
                break
            i += 1
    points = [(start + (i + 1) * w, buckets[i] / window) for i in range(n)]
    return TimeSeries(f"rate {name}", points)


# -- table statistics ------------------------------------------------------

def _with_metadata(table: TrackingTable) -> list[TransferRecord]:
    return [r for r in table.query(_FINISHED) if r.uuid is not None and not r.missing_metadata]


def fault_histogram(table: TrackingTable) -> dict[int, int]:
    """Number of finished transfers (with fault metadata) per fault count."""
    hist: dict[int, int] = {}
    for r in _with_metadata(table):
        hist[r.faults] = hist.get(r.faults, 0) + 1
    return dict(sorted(hist.items()))


def route_summary(table: TrackingTable, log: Iterable[EventLogEntry] = ()) -> list[RouteStats]:
    """Per-route counts, mean lifetime rate and fault figures, in the style of a rates table."""
    delivered: dict[str, int] = {}
    for ev in log:
        if ev.kind == "SUCCEED":
            delivered[ev.route] = delivered.get(ev.route, 0) + ev.payload["bytes"]
    groups: dict[str, list[TransferRecord]] = {}
    for r in table.query():
        if r.uuid is not None:
            groups.setdefault(str(r.route), []).append(r)
    out = []
    for name in sorted(groups):
        rows = groups[name]
        done = [r for r in rows if r.status is S.SUCCEEDED]
        meta = [r for r in rows if r.status in _FINISHED and not r.missing_metadata]
        rate = sum(r.rate for r in done) / len(done) if done else 0.0
        out.append(RouteStats(
            route=name,
            mean_rate=rate / GiB,
            transfers=len(rows),
            missing_metadata=sum(1 for r in rows if r.missing_metadata),
            faults_mean=sum(r.faults for r in meta) / len(meta) if meta else 0.0,
            faults_max=max((r.faults for r in meta), default=0),
            mean_rate_bps=rate,
            succeeded=len(done),
            delivered_bytes=delivered.get(name, sum(r.bytes_transferred for r in done)),
        ))
    return out


# -- replica verification --------------------------------------------------

def verify_replicas(catalog: Catalog, holdings_a: Mapping[str, tuple[int, int]],
                    holdings_b: Mapping[str, tuple[int, int]]) -> VerificationReport:
    """Compare both destinations file by file against the source manifest.

    One mismatch is reported per path: the first entry (in manifest order)
    whose size or checksum differs anywhere, or an unexpected extra file.
    """
    mismatches = []
    expected_keys = set()
    for p in catalog.paths:
        first = None
        for e in catalog.manifest(p).entries:
            key = f"{p.text}/{e.name}"
            expected_keys.add(key)
            want = (e.size, e.checksum)
            a, b = holdings_a.get(key), holdings_b.get(key)
            if first is None and (a != want or b != want):
                first = Mismatch(p.text, e.name, want, _pair(a), _pair(b))
        if first is not None:
            mismatches.append(first)
    unexpected = sorted((set(holdings_a) | set(holdings_b)) - expected_keys)
    for key in unexpected:
        mismatches.append(Mismatch(key.rsplit("/", 1)[0], key.rsplit("/", 1)[1], None,
                                   _pair(holdings_a.get(key)), _pair(holdings_b.get(key))))
    return VerificationReport(len(catalog.paths), mismatches)


def _pair(v) -> tuple[int, int] | None:
    return None if v is None else (int(v[0]), int(v[1]))


# -- report ----------------------------------------------------------------

def build_report(catalog: Catalog, table: TrackingTable, log: list[EventLogEntry], *,
                 now: int | None = None, window: float = DEFAULT_WINDOW, recent: int = 10,
                 samples: int = 48) -> dict:
    """Structured dashboard snapshot: progress per destination, route stats, series."""
    total = catalog.totals.bytes
    now = now if now is not None else (log[-1].time if log else 0)
    destinations = {}
    for d in DESTINATIONS:
        rows = table.query(destination=d)
        done = [r for r in rows if r.status is S.SUCCEEDED]
        done_bytes = sum(r.bytes_transferred for r in done)
        destinations[d.value] = {
            "name": d.display,
            "completed_bytes": done_bytes,
            "fraction": done_bytes / total if total else 0.0,
            "remaining_bytes": total - done_bytes,
            "rows": len(rows),
            "rows_succeeded": len(done),
            "rows_in_flight": sum(1 for r in rows if r.status in IN_FLIGHT),
            "rows_permanent_failed": sum(1 for r in rows if r.status is S.PERMANENT_FAILED),
        }
    active = [
        {"path": r.dataset.text, "route": str(r.route), "status": r.status.value, "uuid": r.uuid,
         "requested": r.requested}
        for r in table.query(IN_FLIGHT)
    ]
    finished = sorted((r for r in table.query(S.SUCCEEDED) if r.completed is not None),
                      key=lambda r: (r.completed, r.dataset.text, r.destination.value))
    recent_rows = [
        {"path": r.dataset.text, "route": str(r.route), "completed": r.completed,
         "bytes": r.bytes_transferred, "rate_gib_s": r.rate / GiB, "faults": r.faults}
        for r in reversed(finished[-recent:])
    ]
    routes = [asdict(s) for s in route_summary(table, log)]
    series = {"cumulative_bytes": {}, "rate_b_s": {}}
    for d in DESTINATIONS:
        series["cumulative_bytes"][d.value] = _thin(cumulative_bytes(log, d).points, samples)
    for name in sorted({ev.route for ev in log}):
        series["rate_b_s"][name] = _thin(instantaneous_rate(log, name, window, end=now).points, samples)
    rates = [r for r in routes if r["succeeded"]]
    return {
        "format": "replicator-report/1",
        "time_ms": now,
        "time_days": now / MS / 86400,
        "catalog": {"paths": len(catalog.paths), "directories": catalog.totals.directories,
                    "files": catalog.totals.files, "bytes": total},
        "destinations": destinations,
        "routes": routes,
        "aggregate_rate_gib_s": sum(r["mean_rate"] for r in rates),
        "faults": {str(k): v for k, v in fault_histogram(table).items()},
        "active": active,
        "recent": recent_rows,
        "series": series,
    }


def _thin(points: list[tuple[int, float]], n: int) -> list[list]:
    if len(points) <= n:
        return [[t, v] for t, v in points]
    step = len(points) / n
    idx = sorted({min(len(points) - 1, int(round((i + 1) * step)) - 1) for i in range(n)})
    return [[points[i][0], points[i][1]] for i in idx]


def flatten_numbers(report: dict, prefix: str = "") -> dict[str, float]:
    """Every numeric leaf of a report keyed by its dotted location."""
    out: dict[str, float] = {}
    if isinstance(report, dict):
        items = report.items()
    elif isinstance(report, list):
        items = ((str(i), v) for i, v in enumerate(report))
    else:
        return out
    for k, v in items:
        key = f"{prefix}.{k}" if prefix else str(k)
        if isinstance(v, bool):
            continue
        if isinstance(v, (int, float)):
            out[key] = v
        elif isinstance(v, (dict, list)):
            out.update(flatten_numbers(v, key))
    return out


_CSS = """
body{font-family:sans-serif;margin:2em;color:#222}
table{border-collapse:collapse;margin:1em 0}
td,th{border:1px solid #bbb;padding:.25em .6em;text-align:right}
th{background:#eee}
.bar{background:#ddd;width:20em;height:1em}
.bar div{background:#3a7;height:1em}
"""


def _num(key: str, value) -> str:
    return f'<td data-field="{html.escape(key)}">{html.escape(repr(value))}</td>'


def emit_report(report: dict, series: dict | None = None, format: str = "structured") -> str:
    """Render a report as JSON (``structured``) or as a self-contained HTML page."""
    if series is not None:
        report = {**report, "series": series}
    if format == "structured":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    if format != "html":
        raise ValueError(f"unknown report format {format!r}")
    out = [
        "<!DOCTYPE html>", '<html><head><meta charset="utf-8"><title>Replication progress</title>',
        f"<style>{_CSS}</style></head><body>",
        f"<h1>Replication progress</h1><p>Simulated time {report.get('time_days', 0):.2f} days "
        f"({report.get('time_ms', 0)} ms)</p>",
        "<table><tr><th>time_ms</th><th>catalog bytes</th><th>paths</th></tr><tr>",
        _num("time_ms", report.get("time_ms", 0)),
        _num("catalog.bytes", report.get("catalog", {}).get("bytes", 0)),
        _num("catalog.paths", report.get("catalog", {}).get("paths", 0)),
        "</tr></table>",
        "<h2>Destinations</h2><table><tr><th>site</th><th>completed bytes</th><th>fraction</th>"
        "<th>remaining bytes</th><th>rows</th><th>succeeded</th><th>in flight</th><th></th></tr>",
    ]
    for site, d in report.get("destinations", {}).items():
        pct = max(0.0, min(1.0, d["fraction"])) * 100
        out.append(f"<tr><th>{html.escape(d.get('name', site))} ({html.escape(site)})</th>")
        for f in ("completed_bytes", "fraction", "remaining_bytes", "rows", "rows_succeeded", "rows_in_flight"):
            out.append(_num(f"destinations.{site}.{f}", d[f]))
        out.append(f'<td><div class="bar"><div style="width:{pct:.1f}%"></div></div></td></tr>')
    out.append("</table><h2>Routes</h2><table><tr><th>route</th><th>mean GiB/s</th><th>transfers</th>"
               "<th>missing</th><th>faults mean</th><th>faults max</th></tr>")
    for i, r in enumerate(report.get("routes", [])):
        out.append(f"<tr><th>{html.escape(r['route'])}</th>")
        for f in ("mean_rate", "transfers", "missing_metadata", "faults_mean", "faults_max"):
            out.append(_num(f"routes.{i}.{f}", r[f]))
        out.append("</tr>")
    out.append("</table><h2>Fault histogram</h2><table><tr><th>faults</th><th>transfers</th></tr>")
    for k, v in report.get("faults", {}).items():
        out.append(f"<tr><th>{html.escape(k)}</th>{_num(f'faults.{k}', v)}</tr>")
    out.append("</table><h2>Active transfers</h2><table><tr><th>path</th><th>route</th><th>status</th></tr>")
    for a in report.get("active", []):
        out.append(f"<tr><td>{html.escape(a['path'])}</td><td>{html.escape(a['route'])}</td>"
                   f"<td>{html.escape(a['status'])}</td></tr>")
    out.append("</table><h2>Recently completed</h2><table><tr><th>path</th><th>route</th>"
               "<th>completed ms</th><th>bytes</th><th>GiB/s</th></tr>")
    for i, r in enumerate(report.get("recent", [])):
        out.append(f"<tr><td>{html.escape(r['path'])}</td><td>{html.escape(r['route'])}</td>")
        for f in ("completed", "bytes", "rate_gib_s"):
            out.append(_num(f"recent.{i}.{f}", r[f]))
        out.append("</tr>")
    out.append("</table>")
    for name, group in report.get("series", {}).items():
        for label, pts in group.items():
            out.append(f"<h3>{html.escape(name)}: {html.escape(label)}</h3>")
            out.append(_svg(pts))
    data = json.dumps(report, sort_keys=True).replace("</", "<\\/")
    out.append(f'<script type="application/json" id="report-data">{data}</script>')
    out.append("</body></html>\n")
    return "\n".join(out)


def _svg(points: list, width: int = 600, height: int = 120) -> str:
    if not points:
        return "<p>(no data)</p>"
    t0, t1 = points[0][0], points[-1][0]
    vmax = max(v for _, v in points) or 1.0
    span = (t1 - t0) or 1
    coords = " ".join(
        f"{(t - t0) / span * width:.1f},{height - v / vmax * height:.1f}" for t, v in points
    )
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
            f'<polyline fill="none" stroke="#3a7" stroke-width="2" points="{coords}"/></svg>')
