"""Sites, routes, transfer statuses and the rows of the tracking table."""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, NamedTuple

from .catalog import Catalog, DatasetPath
from .errors import EmptyCatalog, IllegalTransition


class Site(str, Enum):
    SOURCE_HUB = "SOURCE_HUB"
    LCF_A = "LCF_A"
    LCF_B = "LCF_B"

    @property
    def display(self) -> str:
        return DISPLAY_NAMES[self]

    def __str__(self) -> str:
        return self.value


DISPLAY_NAMES = {Site.SOURCE_HUB: "LLNL", Site.LCF_A: "ALCF", Site.LCF_B: "OLCF"}
DESTINATIONS = (Site.LCF_A, Site.LCF_B)


def other_lcf(site: Site) -> Site:
    if site is Site.SOURCE_HUB:
        raise ValueError("the source hub has no peer facility")
    return Site.LCF_B if site is Site.LCF_A else Site.LCF_A


class Route(NamedTuple):
    source: Site
    destination: Site

    def __str__(self) -> str:
        return f"{self.source.value}->{self.destination.value}"

    @classmethod
    def parse(cls, text: str) -> Route:
        src, _, dst = text.partition("->")
        route = cls(Site(src.strip()), Site(dst.strip()))
        if route.source is route.destination:
            raise ValueError(f"route {text!r} has identical endpoints")
        return route


class TransferStatus(str, Enum):
    NULL = "NULL"
    QUEUED = "QUEUED"
    ACTIVE = "ACTIVE"
    SUCCEEDED = "SUCCEEDED"
    FAILED = "FAILED"
    PAUSED = "PAUSED"
    PERMANENT_FAILED = "PERMANENT_FAILED"

    def __str__(self) -> str:
        return self.value

    @property
    def terminal(self) -> bool:
        return self in (TransferStatus.SUCCEEDED, TransferStatus.PERMANENT_FAILED)


S = TransferStatus
IN_FLIGHT = frozenset({S.QUEUED, S.ACTIVE, S.PAUSED})
PENDING = frozenset({S.NULL, S.FAILED})
NON_TERMINAL = frozenset({S.NULL, S.QUEUED, S.ACTIVE, S.FAILED, S.PAUSED})

# NULL->ACTIVE and FAILED->ACTIVE are the submit shortcut through QUEUED; a
# submission is recorded as ACTIVE straight away, as the replication loop does.
_LEGAL = {
    S.NULL: {S.QUEUED, S.ACTIVE},
    S.QUEUED: {S.ACTIVE},
    S.ACTIVE: {S.SUCCEEDED, S.FAILED, S.PAUSED},
    S.PAUSED: {S.ACTIVE},
    S.FAILED: {S.QUEUED, S.ACTIVE, S.PERMANENT_FAILED},
    S.SUCCEEDED: set(),
    S.PERMANENT_FAILED: set(),
}


def is_legal_transition(old: TransferStatus | None, new: TransferStatus) -> bool:
    """Whether a row may move from ``old`` to ``new``.

    ``old is None`` means the row does not exist yet; new rows start at NULL.
    Non-terminal states may be rewritten in place to refresh counters.
    """
    if old is None:
        return new is S.NULL
    if old == new:
        return not old.terminal
    return new in _LEGAL[old]


def check_transition(key, old: TransferStatus | None, new: TransferStatus) -> None:
    if not is_legal_transition(old, new):
        raise IllegalTransition(key, old, new)


@dataclass(frozen=True)
class TransferRecord:
    """One row of the tracking table: a dataset path bound for one destination.

    Beyond the table's documented columns the row keeps ``failures`` (failed
    attempts so far, for the retry budget), ``error`` (kind of the last
    failure) and ``missing_metadata`` (the backend recorded no fault data).
    """

    dataset: DatasetPath
    source: Site
    destination: Site
    uuid: str | None = None
    requested: int | None = None
    completed: int | None = None
    status: TransferStatus = S.NULL
    directories: int = 0
    files: int = 0
    rate: float = 0.0
    faults: int = 0
    bytes_transferred: int = 0
    failures: int = 0
    error: str | None = None
    missing_metadata: bool = False

    def __post_init__(self):
        if self.source is self.destination:
            raise ValueError(f"source and destination are both {self.source}")
        if self.destination is Site.SOURCE_HUB:
            raise ValueError("the source hub is never a destination")
        if self.faults < 0 or self.rate < 0:
            raise ValueError("faults and rate must be non-negative")

    @property
    def key(self) -> tuple[str, Site]:
        return (self.dataset.text, self.destination)

    @property
    def route(self) -> Route:
        return Route(self.source, self.destination)

    def evolve(self, **changes) -> TransferRecord:
        return replace(self, **changes)


def build_plan(catalog: Catalog, destinations: Iterable[Site] = DESTINATIONS) -> list[TransferRecord]:
    """One NULL row per (catalog path, destination), hub-sourced, in catalog order."""
    destinations = list(destinations)
    if not destinations:
        raise ValueError("at least one destination is required")
    if len(set(destinations)) != len(destinations):
        raise ValueError("destinations must be distinct")
    if Site.SOURCE_HUB in destinations:
        raise ValueError("the source hub cannot be a destination")
    if len(catalog.paths) == 0:
        raise EmptyCatalog("catalog has no paths")
    return [
        TransferRecord(dataset=p, source=Site.SOURCE_HUB, destination=d)
        for p in catalog.paths
        for d in destinations
    ]
