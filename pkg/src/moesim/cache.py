"""Byte-budgeted LRU cache of expert weights stored at one of two precisions.

Rules on top of plain LRU:

* an expert is stored once, at either HIGH or LOW precision;
* a HIGH request against a cached LOW copy is a miss that replaces the copy
  once the HIGH weights arrive (precision promotion);
* a LOW request against a cached HIGH copy is served by the HIGH copy with
  no transfer (conservative reuse).
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Mapping, NamedTuple, Optional

from .errors import CapacityError, NotCachedError
from .traces import Precision


class ExpertKey(NamedTuple):
    layer: int
    expert: int


@dataclass
class CacheEntry:
    key: ExpertKey
    precision: Precision
    bytes: int
    last_use: float
    pins: int = 0

    @property
    def pinned(self) -> bool:
        return self.pins > 0


class OutcomeKind(str, enum.Enum):
    HIT = "hit"
    MISS_LOAD = "miss_load"
    PROMOTE_LOAD = "promote_load"


@dataclass(frozen=True)
class LookupOutcome:
    kind: OutcomeKind
    precision: Precision  # served precision for hits, precision to load otherwise

    @property
    def is_hit(self) -> bool:
        return self.kind is OutcomeKind.HIT


def decide(requested: Precision, cached: Optional[Precision]) -> LookupOutcome:
    """The lookup decision table, as a pure function of the two precisions."""
    if requested is Precision.SKIP:
        raise ValueError("skipped experts are never looked up")
    if cached is None:
        return LookupOutcome(OutcomeKind.MISS_LOAD, requested)
    if cached is Precision.HIGH:
        return LookupOutcome(OutcomeKind.HIT, Precision.HIGH)
    if requested is Precision.HIGH:
        return LookupOutcome(OutcomeKind.PROMOTE_LOAD, Precision.HIGH)
    return LookupOutcome(OutcomeKind.HIT, Precision.LOW)


class ExpertCache:
    """LRU expert store with a byte budget and reference-counted pins.

    Not thread-safe; the engine owns it from a single event loop.
    """

    def __init__(self, capacity_bytes: float, expert_bytes: Mapping[Precision, int]):
        if capacity_bytes < 0:
            raise ValueError("capacity_bytes must be >= 0")
        self.capacity = capacity_bytes
        self.expert_bytes = dict(expert_bytes)
        self._entries: "OrderedDict[ExpertKey, CacheEntry]" = OrderedDict()
        self.used = 0
        self._clock = 0

    def _tick(self, now: Optional[float]) -> float:
        self._clock += 1
        return self._clock if now is None else now

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return ExpertKey(*key) in self._entries

    def cached_precision(self, key) -> Optional[Precision]:
        """Precision held for ``key`` without touching recency."""
        e = self._entries.get(ExpertKey(*key))
        return None if e is None else e.precision

    def lookup(self, key, requested: Precision, now: Optional[float] = None) -> LookupOutcome:
        key = ExpertKey(*key)
        entry = self._entries.get(key)
        outcome = decide(Precision(requested), None if entry is None else entry.precision)
        if outcome.is_hit:
            entry.last_use = self._tick(now)
            self._entries.move_to_end(key)
        return outcome

    def _plan_evictions(self, key: ExpertKey, size: int) -> List[ExpertKey]:
        old = self._entries.get(key)
        free = self.capacity - self.used + (old.bytes if old is not None else 0)
        victims = []
        for k, e in self._entries.items():
            if free >= size:
                break
            if k == key or e.pinned:
                continue
            victims.append(k)
            free += e.bytes
        if free < size:
            raise CapacityError(f"cannot fit {key} ({size} bytes) in {self.capacity} bytes")
        return victims

    def insert(self, key, precision: Precision, now: Optional[float] = None) -> List[ExpertKey]:
        """Store ``key`` at ``precision``; return evicted keys in eviction order.

        A copy of the same key at another precision is replaced and reported
        first. Raises CapacityError, leaving the cache unchanged, when the
        entry cannot fit after evicting every unpinned entry.
        """
        key = ExpertKey(*key)
        precision = Precision(precision)
        if precision is Precision.SKIP:
            raise ValueError("skipped experts are never cached")
        size = self.expert_bytes[precision]
        old = self._entries.get(key)
        if old is not None and old.precision is precision:
            old.last_use = self._tick(now)
            self._entries.move_to_end(key)
            return []
        if size > self.capacity:
            raise CapacityError(f"entry of {size} bytes exceeds capacity {self.capacity}")
        victims = self._plan_evictions(key, size)
        evicted = []
        pins = 0
        if old is not None:
            pins = old.pins
            del self._entries[key]
            self.used -= old.bytes
            evicted.append(key)
        for k in victims:
            self.used -= self._entries.pop(k).bytes
            evicted.append(k)
        self._entries[key] = CacheEntry(key, precision, size, self._tick(now), pins)
        self.used += size
        return evicted

    def pin(self, key) -> None:
        key = ExpertKey(*key)
        if key not in self._entries:
            raise NotCachedError(key)
        self._entries[key].pins += 1

    def unpin(self, key) -> None:
        key = ExpertKey(*key)
        entry = self._entries.get(key)
        if entry is None:
            raise NotCachedError(key)
        if entry.pins == 0:
            raise ValueError(f"{key} is not pinned")
        entry.pins -= 1

    def snapshot(self) -> List[CacheEntry]:
        """Entries from least to most recently used (copies)."""
        return [CacheEntry(e.key, e.precision, e.bytes, e.last_use, e.pins) for e in self._entries.values()]
