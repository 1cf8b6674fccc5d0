"""Crash-recoverable tracking table backed by an append-only journal.

Journal format (UTF-8, one entry per line)::

    <json-array> TAB <crc32 of the json text, 8 hex digits> LF

The JSON array starts with ``seq, ts, op``.  ``seq`` increases strictly;
``ts`` is the simulation clock in ms (or an ISO-8601 string against a real
backend).  Remaining fields by ``op``:

``PUT``     txn, dataset, prefix, facets, source, destination, uuid,
            requested, completed, status, directories, files, rate, faults,
            bytes_transferred, failures, error, missing_metadata
``SET``     same fields as ``PUT``; a baseline row written by compaction,
            applied without checking the status transition
``DEL``     txn, dataset, prefix, facets, destination, reason
``COMMIT``  tag

``txn`` is 1 for entries written inside a transaction; those take effect only
once the matching ``COMMIT`` is read.  A torn or uncommitted tail is dropped
(and truncated away) when the journal is reopened.
"""

from __future__ import annotations

import builtins
import heapq
import json
import logging
import os
import zlib
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

from sortedcontainers import SortedList

from .catalog import DatasetPath, parse_drs_path
from .core import (
    DESTINATIONS,
    PENDING,
    Site,
    TransferRecord,
    TransferStatus,
    check_transition,
)
from .errors import CorruptJournal

log = logging.getLogger(__name__)

PUT_FIELDS = (
    "dataset", "source", "destination", "uuid", "requested", "completed", "status",
    "directories", "files", "rate", "faults", "bytes_transferred", "failures", "error",
    "missing_metadata",
)
_DEST_RANK = {Site.LCF_A: 0, Site.LCF_B: 1, Site.SOURCE_HUB: 2}


class Submission(NamedTuple):
    ts: int | str
    uuid: str
    source: Site
    destination: Site
    dataset: DatasetPath


def _encode(payload: list) -> str:
    text = json.dumps(payload, separators=(",", ":"), ensure_ascii=False)
    return f"{text}\t{zlib.crc32(text.encode()):08x}\n"


def _dataset_fields(p: DatasetPath) -> list:
    return [p.text, p.prefix, ",".join(p.facets)]


def _dataset_from(text: str, prefix: str, facets: str) -> DatasetPath:
    return parse_drs_path(text, "generic", prefix=prefix, facets=facets.split(","))


class TrackingTable:
    """In-memory view of the ``transfer`` table plus its journal.

    Single writer.  Reads return immutable records, so a reader holding a
    query result sees a consistent snapshot.
    """

    def __init__(self, location: str | os.PathLike, *, fsync: bool = True):
        self.location = Path(location)
        self.fsync = fsync
        self.now: int | str = 0
        self._reset()
        self._replay()
        self._fh = builtins.open(self.location, "ab")

    # -- state -------------------------------------------------------------

    def _reset(self):
        self.seq = 0
        self.rows: dict[tuple[str, Site], TransferRecord] = {}
        self.retired: dict[tuple[str, Site], str] = {}
        self.paths: dict[str, DatasetPath] = {}
        self._order: dict[str, int] = {}
        self._by_order: list[str] = []
        self._buckets: dict[tuple[Site, TransferStatus], SortedList] = {}
        self._ready: dict[tuple[Site, Site], SortedList] = {}
        self._uuids: set[str] = set()
        self.submissions: list[Submission] = []
        self.last_commit: tuple[str, int | str] | None = None
        self.last_step_ts: int | str | None = None
        self._in_txn = False

    def _bucket(self, dest: Site, status: TransferStatus) -> SortedList:
        b = self._buckets.get((dest, status))
        if b is None:
            b = self._buckets[(dest, status)] = SortedList()
        return b

    def _ready_list(self, held: Site, missing: Site) -> SortedList:
        b = self._ready.get((held, missing))
        if b is None:
            b = self._ready[(held, missing)] = SortedList()
        return b

    def _register(self, text: str, dataset: DatasetPath) -> int:
        if text not in self._order:
            self._order[text] = len(self._by_order)
            self._by_order.append(text)
            self.paths[text] = dataset
        return self._order[text]

    def _apply_put(self, rec: TransferRecord, ts) -> None:
        key = rec.key
        text = key[0]
        order = self._register(text, rec.dataset)
        old = self.rows.get(key)
        if old is not None:
            self._bucket(old.destination, old.status).remove(order)
        self.rows[key] = rec
        self._bucket(rec.destination, rec.status).add(order)
        self.retired.pop(key, None)
        if rec.uuid and rec.uuid not in self._uuids:
            self._uuids.add(rec.uuid)
            self.submissions.append(Submission(ts, rec.uuid, rec.source, rec.destination, rec.dataset))
        self._reindex(text)

    def _apply_del(self, text: str, dest: Site, reason: str) -> None:
        key = (text, dest)
        old = self.rows.pop(key, None)
        if old is not None:
            self._bucket(dest, old.status).remove(self._order[text])
        self.retired[key] = reason
        self._reindex(text)

    def _reindex(self, text: str) -> None:
        order = self._order[text]
        for held in DESTINATIONS:
            for missing in DESTINATIONS:
                if held is missing:
                    continue
                h = self.rows.get((text, held))
                m = self.rows.get((text, missing))
                ready = (
                    h is not None and h.status is TransferStatus.SUCCEEDED
                    and m is not None and m.status in PENDING
                )
                lst = self._ready_list(held, missing)
                if ready and order not in lst:
                    lst.add(order)
                elif not ready and order in lst:
                    lst.remove(order)

    # -- journal replay ----------------------------------------------------

    def _replay(self) -> None:
        if not self.location.exists():
            self.location.parent.mkdir(parents=True, exist_ok=True)
            self.location.touch()
            return
        data = self.location.read_bytes()
        lines = data.split(b"\n")
        torn_tail = lines[-1] != b""
        if not torn_tail:
            lines = lines[:-1]
        committed_offset = 0
        offset = 0
        pending: list[tuple[list, int]] = []
        last_seq = 0
        for idx, raw in enumerate(lines):
            is_last = idx == len(lines) - 1
            line_end = offset + len(raw) + (0 if (is_last and torn_tail) else 1)
            try:
                entry = self._decode(raw)
            except ValueError as exc:
                if is_last:
                    log.warning("discarding torn journal entry at byte %d: %s", offset, exc)
                    break
                raise CorruptJournal(f"bad entry at line {idx + 1}: {exc}", last_seq) from None
            if is_last and torn_tail:
                log.warning("discarding journal entry without line terminator at byte %d", offset)
                break
            seq = entry[0]
            if not isinstance(seq, int) or seq <= last_seq:
                raise CorruptJournal(f"sequence {seq!r} after {last_seq} at line {idx + 1}", last_seq)
            last_seq = seq
            op = entry[2]
            if op == "COMMIT":
                for pend, _ in pending:
                    self._apply_entry(pend, last_seq)
                pending.clear()
                self._note_commit(entry[3], entry[1])
                self.seq = seq
                committed_offset = line_end
            elif entry[3]:
                pending.append((entry, line_end))
            else:
                if pending:
                    raise CorruptJournal(f"autocommit entry inside open transaction at line {idx + 1}", last_seq)
                self._apply_entry(entry, last_seq)
                self.seq = seq
                committed_offset = line_end
            offset = line_end
        if pending:
            log.warning("rolling back %d uncommitted journal entries", len(pending))
        if committed_offset != len(data):
            with builtins.open(self.location, "r+b") as fh:
                fh.truncate(committed_offset)

    @staticmethod
    def _decode(raw: bytes) -> list:
        text, sep, crc = raw.decode("utf-8").rpartition("\t")
        if not sep:
            raise ValueError("missing checksum")
        if f"{zlib.crc32(text.encode()):08x}" != crc:
            raise ValueError("checksum mismatch")
        entry = json.loads(text)
        if not isinstance(entry, list) or len(entry) < 4 or entry[2] not in ("PUT", "SET", "DEL", "COMMIT"):
            raise ValueError("malformed entry")
        return entry

    def _apply_entry(self, entry: list, last_seq: int) -> None:
        seq, ts, op, _txn = entry[:4]
        try:
            if op in ("PUT", "SET"):
                rec = self._record_from(entry[4:])
                if op == "PUT":
                    old = self.rows.get(rec.key)
                    check_transition(rec.key, old.status if old else None, rec.status)
                self._apply_put(rec, ts)
            else:
                text, prefix, facets, dest, reason = entry[4:9]
                self._register(text, _dataset_from(text, prefix, facets))
                self._apply_del(text, Site(dest), reason)
        except (ValueError, TypeError, KeyError) as exc:
            raise CorruptJournal(f"entry {seq}: {exc}", last_seq - 1) from None

    def _note_commit(self, tag: str, ts) -> None:
        self.last_commit = (tag, ts)
        if tag == "step":
            self.last_step_ts = ts

    @staticmethod
    def _record_from(fields: list) -> TransferRecord:
        (text, prefix, facets, source, dest, uuid, requested, completed, status, directories,
         files, rate, faults, nbytes, failures, error, missing) = fields
        return TransferRecord(
            dataset=_dataset_from(text, prefix, facets),
            source=Site(source),
            destination=Site(dest),
            uuid=uuid,
            requested=requested,
            completed=completed,
            status=TransferStatus(status),
            directories=directories,
            files=files,
            rate=float(rate),
            faults=faults,
            bytes_transferred=nbytes,
            failures=failures,
            error=error,
            missing_metadata=bool(missing),
        )

    # -- writes ------------------------------------------------------------

    def _write(self, payload: list) -> None:
        self._fh.write(_encode(payload).encode("utf-8"))
        self._fh.flush()
        if not self._in_txn and self.fsync:
            os.fsync(self._fh.fileno())

    def upsert(self, rec: TransferRecord, ts=None) -> int:
        """Write a full snapshot of ``rec``; rejects illegal status transitions."""
        old = self.rows.get(rec.key)
        check_transition(rec.key, old.status if old else None, rec.status)
        ts = self.now if ts is None else ts
        self.seq += 1
        payload = [self.seq, ts, "PUT", int(self._in_txn), *_dataset_fields(rec.dataset)]
        payload += [
            rec.source.value, rec.destination.value, rec.uuid, rec.requested, rec.completed,
            rec.status.value, rec.directories, rec.files, rec.rate, rec.faults,
            rec.bytes_transferred, rec.failures, rec.error, int(rec.missing_metadata),
        ]
        self._write(payload)
        self._apply_put(rec, ts)
        return self.seq

    def insert_many(self, records: Iterable[TransferRecord], ts=None) -> int:
        with self.transaction("plan", ts):
            n = 0
            for rec in records:
                self.upsert(rec, ts)
                n += 1
        return n

    def retire(self, dataset: DatasetPath, destination: Site, reason: str, ts=None) -> int:
        """Remove a row (e.g. a split parent replaced by its children)."""
        ts = self.now if ts is None else ts
        self.seq += 1
        self._write([self.seq, ts, "DEL", int(self._in_txn), *_dataset_fields(dataset),
                     destination.value, reason])
        self._register(dataset.text, dataset)
        self._apply_del(dataset.text, destination, reason)
        return self.seq

    @contextmanager
    def transaction(self, tag: str = "txn", ts=None):
        """Group writes so they become visible on replay only together.

        On an exception the journal is cut back to the transaction start and
        the in-memory table is rebuilt from it.
        """
        if self._in_txn:
            yield self
            return
        start = self._fh.tell()
        self._in_txn = True
        wrote_from = self.seq
        try:
            yield self
        except BaseException:
            self._in_txn = False
            self._fh.flush()
            self._fh.truncate(start)
            self._fh.close()
            self._reset()
            self._replay()
            self._fh = builtins.open(self.location, "ab")
            raise
        self._in_txn = False
        if self.seq == wrote_from:
            return
        ts = self.now if ts is None else ts
        self.seq += 1
        self._write([self.seq, ts, "COMMIT", tag])
        self._note_commit(tag, ts)

    def compact(self) -> None:
        """Rewrite the journal with one entry per live row (and per retired row).

        Submission history (used to rebuild a simulated fabric on resume) is
        not preserved.
        """
        tmp = self.location.with_suffix(self.location.suffix + ".compact")
        seq = 0
        ts = self.now
        with builtins.open(tmp, "w", encoding="utf-8") as fh:
            for text in self._by_order:
                for dest in sorted(DESTINATIONS, key=_DEST_RANK.get):
                    rec = self.rows.get((text, dest))
                    if rec is not None:
                        seq += 1
                        fh.write(_encode([seq, ts, "SET", 1, *_dataset_fields(rec.dataset),
                                          rec.source.value, rec.destination.value, rec.uuid,
                                          rec.requested, rec.completed, rec.status.value,
                                          rec.directories, rec.files, rec.rate, rec.faults,
                                          rec.bytes_transferred, rec.failures, rec.error,
                                          int(rec.missing_metadata)]))
                    elif (text, dest) in self.retired:
                        seq += 1
                        fh.write(_encode([seq, ts, "DEL", 1, *_dataset_fields(self.paths[text]),
                                          dest.value, self.retired[(text, dest)]]))
            seq += 1
            tag, cts = self.last_commit if self.last_commit else ("compact", ts)
            fh.write(_encode([seq, cts, "COMMIT", tag]))
            fh.flush()
            os.fsync(fh.fileno())
        self._fh.close()
        os.replace(tmp, self.location)
        self._reset()
        self._replay()
        self._fh = builtins.open(self.location, "ab")

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- reads -------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.rows)

    def order_of(self, dataset: DatasetPath | str) -> int:
        return self._order[str(dataset)]

    def get(self, dataset: DatasetPath | str, destination: Site) -> TransferRecord | None:
        return self.rows.get((str(dataset), destination))

    def rows_for(self, dataset: DatasetPath | str) -> dict[Site, TransferRecord]:
        text = str(dataset)
        return {d: self.rows[(text, d)] for d in DESTINATIONS if (text, d) in self.rows}

    def datasets(self) -> list[DatasetPath]:
        """Live datasets in first-appearance order."""
        return [self.paths[t] for t in self._by_order if any((t, d) in self.rows for d in DESTINATIONS)]

    def _sort_key(self, rec: TransferRecord):
        return (self._order[rec.key[0]], _DEST_RANK[rec.destination])

    def query(
        self,
        status: TransferStatus | Iterable[TransferStatus] | None = None,
        source: Site | None = None,
        destination: Site | None = None,
        dataset: DatasetPath | str | None = None,
    ) -> list[TransferRecord]:
        """Current rows matching every given field, in table order then destination."""
        if isinstance(status, TransferStatus):
            statuses = {status}
        else:
            statuses = set(status) if status is not None else None
        if dataset is not None:
            cands = list(self.rows_for(dataset).values())
        elif statuses is not None:
            dests = [destination] if destination is not None else list(DESTINATIONS)
            cands = [
                self.rows[(self._by_order[o], d)]
                for d in dests
                for s in statuses
                for o in self._buckets.get((d, s), ())
            ]
        else:
            cands = list(self.rows.values())
        out = [
            r for r in cands
            if (statuses is None or r.status in statuses)
            and (source is None or r.source is source)
            and (destination is None or r.destination is destination)
        ]
        out.sort(key=self._sort_key)
        return out

    def count(self, statuses: Iterable[TransferStatus], source: Site | None = None,
              destination: Site | None = None) -> int:
        if source is None:
            dests = [destination] if destination is not None else list(DESTINATIONS)
            return sum(len(self._buckets.get((d, s), ())) for d in dests for s in statuses)
        return len(self.query(statuses, source=source, destination=destination))

    def iter_status(self, destination: Site, statuses: Iterable[TransferStatus]) -> Iterator[TransferRecord]:
        """Lazily walk rows for ``destination`` with any of ``statuses`` in table order.

        The table must not be modified while the iterator is in use.
        """
        lists = [self._buckets.get((destination, s), ()) for s in statuses]
        for order in heapq.merge(*lists):
            yield self.rows[(self._by_order[order], destination)]

    def held_not_pending(self, held: Site, missing: Site) -> Iterator[DatasetPath]:
        """Datasets SUCCEEDED at ``held`` whose row for ``missing`` is NULL or FAILED."""
        for order in list(self._ready_list(held, missing)):
            yield self.paths[self._by_order[order]]


def open_table(location: str | os.PathLike, *, fsync: bool = True) -> TrackingTable:
    """Open (or create) the tracking table journaled at ``location``."""
    return TrackingTable(location, fsync=fsync)
