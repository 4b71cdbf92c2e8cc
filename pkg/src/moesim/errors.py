"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent.

    ``field`` names the offending field so CLI messages can point at it.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class TraceError(ValueError):
    """Base class for trace file problems."""


class TraceParseError(TraceError):
    """The trace file is syntactically broken or truncated."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class TraceSchemaError(TraceError):
    """A record parses but violates the trace invariants."""


class CapacityError(RuntimeError):
    """An entry cannot fit in the cache even after evicting every unpinned entry."""


class NotCachedError(KeyError):
    """Operation on a key that is not in the cache."""
