"""Exception types shared across the replication modules."""

from __future__ import annotations


class ReplicationError(Exception):
    """Base class for every error raised by this package."""


class MalformedPath(ReplicationError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InvalidSpec(ReplicationError, ValueError):
    pass


class UnknownPath(ReplicationError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown path"


class UnsplittablePath(ReplicationError):
    pass


class EmptyCatalog(ReplicationError, ValueError):
    pass


class IllegalTransition(ReplicationError):
    def __init__(self, key, old, new):
        super().__init__(f"illegal transition {old} -> {new} for {key}")
        self.key = key
        self.old = old
        self.new = new


class CorruptJournal(ReplicationError):
    def __init__(self, message: str, last_good_seq: int):
        super().__init__(f"{message} (last good sequence {last_good_seq})")
        self.last_good_seq = last_good_seq


class UnknownTransfer(ReplicationError, KeyError):
    pass


class SourceMissingData(ReplicationError):
    pass


class BackendUnavailable(ReplicationError):
    pass
