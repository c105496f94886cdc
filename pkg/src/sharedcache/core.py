"""Shared-object LRU cache.

One physical store of capacity ``B`` is viewed through ``J`` proxy-owned
LRU lists.  An object held by several lists is charged ``length / |P|`` to
each of them, where ``P`` is its share set.  When a list evicts a shared
object the remaining holders are charged more (inflation), which can push
them over their own allocation and cascade into ripple evictions.

Attributed lengths are kept as integers scaled by a common denominator so
that every ``length / |P|`` is exact.  The public accessors return
:class:`fractions.Fraction` values.
"""

from __future__ import annotations

import enum
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from math import lcm
from typing import Any, Hashable, Iterable, Sequence

ObjectKey = Hashable


class Mode(enum.Enum):
    STANDARD = "standard"
    RRE = "rre"


class Outcome(enum.Enum):
    LIST_HIT = "list_hit"
    LIST_MISS_CACHE_HIT = "list_miss_cache_hit"
    MISS = "miss"


class CacheError(Exception):
    """Base class for engine errors."""


class ObjectTooLarge(CacheError, ValueError):
    pass


class CapacityExhausted(CacheError):
    """The physical store cannot hold an object even after all evictions.

    ``trace`` carries the list evictions already performed before giving up.
    """

    def __init__(self, message: str, trace: "EvictionTrace | None" = None):
        super().__init__(message)
        self.trace = trace


class ObjectRecord:
    __slots__ = ("key", "length", "share_set", "orphan", "value", "_charged")

    def __init__(self, key: ObjectKey, length: int, value: Any = None):
        self.key = key
        self.length = length
        self.share_set: set[int] = set()
        self.orphan = False
        self.value = value
        # scaled attribution currently charged to each member of share_set
        self._charged = 0

    def __repr__(self) -> str:
        return (f"ObjectRecord(key={self.key!r}, length={self.length}, "
                f"share_set={sorted(self.share_set)}, orphan={self.orphan})")


@dataclass
class EvictionTrace:
    """List evictions caused by one request, in the order they happened.

    Each entry is ``(proxy, key, was_physical)``; ``was_physical`` is set when
    the object lost its last holder and was then reclaimed for space during
    the same request.  ``physical_evictions`` counts every orphan reclaimed
    while serving the request, including older orphans.
    """

    entries: list = field(default_factory=list)
    physical_evictions: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass(frozen=True)
class RequestOutcome:
    kind: Outcome
    evictions: EvictionTrace

    @property
    def num_evictions(self) -> int:
        return len(self.evictions.entries)


_EMPTY = EvictionTrace()
_HIT = RequestOutcome(Outcome.LIST_HIT, _EMPTY)
_MISS = RequestOutcome(Outcome.MISS, _EMPTY)


class SharedCache:
    """LRU lists with object sharing over one physical store.

    Parameters
    ----------
    physical_capacity : int
        Physical memory ``B`` in memory units.
    allocations : sequence of int or Fraction
        Virtual allocation ``b_i`` of each proxy's list.
    mode : Mode
        ``Mode.RRE`` enables the dual-threshold variant: the list that takes
        a miss evicts down to its allocation, every other list only evicts
        once it exceeds its ripple threshold.
    ripple_thresholds : sequence, optional
        ``b_hat_i >= b_i``; only valid in RRE mode.  Defaults to the
        allocations.

    The engine is not synchronized; callers serialize access.
    """

    def __init__(self, physical_capacity: int, allocations: Sequence,
                 mode: Mode = Mode.STANDARD,
                 ripple_thresholds: Sequence | None = None):
        mode = Mode(mode)
        if int(physical_capacity) != physical_capacity or physical_capacity <= 0:
            raise ValueError("physical capacity must be a positive integer")
        allocs = [Fraction(b) for b in allocations]
        if not allocs:
            raise ValueError("at least one proxy is required")
        if any(b <= 0 for b in allocs):
            raise ValueError("allocations must be positive")
        if ripple_thresholds is not None:
            if mode is not Mode.RRE:
                raise ValueError("ripple thresholds require RRE mode")
            ripple = [Fraction(b) for b in ripple_thresholds]
            if len(ripple) != len(allocs):
                raise ValueError("one ripple threshold per proxy is required")
            if any(r < b for r, b in zip(ripple, allocs)):
                raise ValueError("ripple thresholds must satisfy b_i <= b_hat_i")
        else:
            ripple = list(allocs)

        self.capacity = int(physical_capacity)
        self.mode = mode
        self.num_proxies = len(allocs)
        self.allocations = tuple(allocs)
        self.ripple_thresholds = tuple(ripple)

        denom = 1
        for x in (*allocs, *ripple):
            denom = lcm(denom, x.denominator)
        # every ell / |P| with |P| <= J is an integer multiple of 1/scale
        self._scale = lcm(*range(1, self.num_proxies + 1)) * denom
        self._alloc = [int(b * self._scale) for b in allocs]
        self._ripple = [int(r * self._scale) for r in ripple]

        self._lists: list[OrderedDict] = [OrderedDict() for _ in allocs]
        self._vlen = [0] * self.num_proxies
        self._store: dict[ObjectKey, ObjectRecord] = {}
        self._orphans: OrderedDict = OrderedDict()
        self._used = 0
        self._memberships = 0

    # -- read-only views -------------------------------------------------

    @property
    def occupancy(self) -> int:
        return self._used

    @property
    def scale(self) -> int:
        return self._scale

    def __contains__(self, key) -> bool:
        return key in self._store

    def __len__(self) -> int:
        return len(self._store)

    def record(self, key) -> ObjectRecord:
        try:
            return self._store[key]
        except KeyError:
            raise KeyError(key) from None

    def keys(self, proxy: int) -> list:
        """Keys of a list from head (MRU) to tail (LRU)."""
        self._check_proxy(proxy)
        return list(reversed(self._lists[proxy]))

    def in_list(self, proxy: int, key) -> bool:
        return key in self._lists[proxy]

    def virtual_length(self, proxy: int) -> Fraction:
        self._check_proxy(proxy)
        return Fraction(self._vlen[proxy], self._scale)

    def attribution(self, proxy: int, key) -> Fraction:
        rec = self.record(key)
        if proxy not in rec.share_set:
            return Fraction(0)
        return Fraction(rec._charged, self._scale)

    def orphans(self) -> list:
        """Orphaned keys, least recently orphaned first."""
        return list(self._orphans)

    def threshold(self, proxy: int) -> Fraction:
        """Eviction threshold a list is held to once a request completes."""
        if self.mode is Mode.RRE:
            return self.ripple_thresholds[proxy]
        return self.allocations[proxy]

    # -- requests --------------------------------------------------------

    def get(self, proxy: int, key) -> RequestOutcome:
        if not 0 <= proxy < self.num_proxies:
            raise IndexError(f"invalid proxy id {proxy}")
        lst = self._lists[proxy]
        if key in lst:
            lst.move_to_end(key)
            return _HIT
        rec = self._store.get(key)
        if rec is None:
            return _MISS
        if rec.orphan:
            del self._orphans[key]
            rec.orphan = False
        self._join(rec, proxy)
        trace = EvictionTrace()
        self._rebalance(proxy, trace.entries)
        return RequestOutcome(Outcome.LIST_MISS_CACHE_HIT, trace)

    def set(self, proxy: int, key, length: int, value: Any = None) -> RequestOutcome:
        """Store or update ``key`` on behalf of ``proxy``.

        Raises :class:`ObjectTooLarge` when ``length`` exceeds the physical
        capacity or the proxy's own allocation, and
        :class:`CapacityExhausted` when no amount of eviction frees enough
        physical room (the object is then dropped from the cache).
        """
        self._check_proxy(proxy)
        if int(length) != length or length <= 0:
            raise ValueError("length must be a positive integer")
        length = int(length)
        if length > self.capacity:
            raise ObjectTooLarge(f"object of length {length} exceeds capacity {self.capacity}")
        if length * self._scale > self._alloc[proxy]:
            raise ObjectTooLarge(
                f"object of length {length} exceeds allocation of proxy {proxy}")

        rec = self._store.get(key)
        lst = self._lists[proxy]
        if rec is None:
            kind = Outcome.MISS
            rec = ObjectRecord(key, length, value)
            rec._charged = length * self._scale
            self._store[key] = rec
            self._join(rec, proxy)
            extra = length
        else:
            kind = Outcome.LIST_HIT if proxy in rec.share_set else Outcome.LIST_MISS_CACHE_HIT
            extra = length - rec.length
            rec.value = value
            if rec.orphan:
                del self._orphans[key]
                rec.orphan = False
            if extra:
                rec.length = length
                self._reattribute(rec)
            if proxy in rec.share_set:
                lst.move_to_end(key)
            else:
                self._join(rec, proxy)

        trace = EvictionTrace()
        self._rebalance(proxy, trace.entries)
        if extra > 0:
            self._make_room(proxy, rec, extra, trace)
        self._used += extra
        return RequestOutcome(kind, trace)

    def rebalance(self) -> EvictionTrace:
        """Evict until no list exceeds its threshold."""
        trace = EvictionTrace()
        self._rebalance(None, trace.entries)
        return trace

    def evict_tail(self, proxy: int):
        """Drop the tail of one list; returns ``(key, became_orphan)``.

        Remaining holders are inflated but not rebalanced.
        """
        self._check_proxy(proxy)
        if not self._lists[proxy]:
            raise CacheError(f"list {proxy} is empty")
        return self._evict_tail(proxy)

    def inflate(self, key) -> None:
        """Re-charge every holder of ``key`` with ``length / |P|``.

        May leave lists over their threshold; callers rebalance.
        """
        self._reattribute(self.record(key))

    def deflate(self, key) -> None:
        self._reattribute(self.record(key))

    def reclaim_orphans(self, needed: int) -> int:
        """Physically drop orphans, oldest first, until ``needed`` units are free."""
        if needed < 0:
            raise ValueError("needed must be nonnegative")
        count = 0
        orphans = self._orphans
        store = self._store
        while self.capacity - self._used < needed and orphans:
            key, _ = orphans.popitem(last=False)
            self._used -= store.pop(key).length
            count += 1
        return count

    # -- internals -------------------------------------------------------

    def _check_proxy(self, proxy: int) -> None:
        if not 0 <= proxy < self.num_proxies:
            raise IndexError(f"invalid proxy id {proxy}")

    def _reattribute(self, rec: ObjectRecord) -> None:
        sharers = rec.share_set
        if not sharers:
            rec._charged = rec.length * self._scale
            return
        new = rec.length * self._scale // len(sharers)
        delta = new - rec._charged
        if delta:
            vlen = self._vlen
            for j in sharers:
                vlen[j] += delta
            rec._charged = new

    def _join(self, rec: ObjectRecord, proxy: int) -> None:
        rec.share_set.add(proxy)
        self._vlen[proxy] += rec._charged
        self._reattribute(rec)
        self._lists[proxy][rec.key] = None
        self._memberships += 1

    def _evict_tail(self, proxy: int):
        key, _ = self._lists[proxy].popitem(last=False)
        rec = self._store[key]
        rec.share_set.discard(proxy)
        self._vlen[proxy] -= rec._charged
        self._memberships -= 1
        if rec.share_set:
            self._reattribute(rec)
            return key, False
        rec._charged = rec.length * self._scale
        rec.orphan = True
        self._orphans[key] = None
        return key, True

    def _rebalance(self, primary: int | None, entries: list) -> None:
        vlen = self._vlen
        alloc = self._alloc
        thr = self._ripple
        nproxies = self.num_proxies
        budget = self._memberships
        while True:
            best = -1
            worst = 0
            for j in range(nproxies):
                over = vlen[j] - (alloc[j] if j == primary else thr[j])
                if over > worst:
                    best = j
                    worst = over
            if best < 0:
                return
            if budget <= 0:
                raise AssertionError("rebalance exceeded its iteration bound")
            budget -= 1
            key, _ = self._evict_tail(best)
            entries.append((best, key, False))

    def _make_room(self, proxy: int, rec: ObjectRecord, extra: int,
                   trace: EvictionTrace) -> None:
        trace.physical_evictions += self._reclaim_tracked(extra, trace)
        lst = self._lists[proxy]
        while self.capacity - self._used < extra:
            if len(lst) <= 1:
                self._drop(rec, rec.length - extra)
                raise CapacityExhausted(
                    f"no room for {rec.key!r} (length {rec.length})", trace)
            key, _ = self._evict_tail(proxy)
            trace.entries.append((proxy, key, False))
            self._rebalance(proxy, trace.entries)
            trace.physical_evictions += self._reclaim_tracked(extra, trace)

    def _reclaim_tracked(self, needed: int, trace: EvictionTrace) -> int:
        if self.capacity - self._used >= needed:
            return 0
        orphans = self._orphans
        store = self._store
        dropped = []
        while self.capacity - self._used < needed and orphans:
            key, _ = orphans.popitem(last=False)
            self._used -= store.pop(key).length
            dropped.append(key)
        if dropped and trace.entries:
            gone = set(dropped)
            trace.entries[:] = [(p, k, k in gone or phys) for p, k, phys in trace.entries]
        return len(dropped)

    def _drop(self, rec: ObjectRecord, resident: int) -> None:
        # Remove an object that could not be given physical room.  Leaving
        # lists only deflates nobody and never inflates, so no rebalance.
        for j in list(rec.share_set):
            self._vlen[j] -= rec._charged
            del self._lists[j][rec.key]
            self._memberships -= 1
        rec.share_set.clear()
        del self._store[rec.key]
        if rec.orphan:
            del self._orphans[rec.key]
        self._used -= resident

    # -- snapshots -------------------------------------------------------

    def stats(self) -> dict:
        """Consistent read-only snapshot of the cache state."""
        return {
            "virtual_lengths": [Fraction(v, self._scale) for v in self._vlen],
            "occupancy": self._used,
            "orphan_count": len(self._orphans),
            "list_sizes": [len(lst) for lst in self._lists],
            "objects": len(self._store),
        }

    def snapshot(self) -> dict:
        """JSON-ready state dump; see README for the schema."""
        def fmt(x: Fraction) -> str:
            return str(x)

        lists = []
        for i, lst in enumerate(self._lists):
            keys = list(reversed(lst))
            lists.append({
                "proxy": i,
                "allocation": fmt(self.allocations[i]),
                "ripple_threshold": fmt(self.ripple_thresholds[i]),
                "virtual_length": fmt(self.virtual_length(i)),
                "keys": [_json_key(k) for k in keys],
                "attributions": [fmt(self.attribution(i, k)) for k in keys],
            })
        objects = [
            {"key": _json_key(rec.key), "length": rec.length,
             "share_set": sorted(rec.share_set), "orphan": rec.orphan}
            for rec in self._store.values()
        ]
        return {
            "version": 1,
            "capacity": self.capacity,
            "mode": self.mode.value,
            "occupancy": self._used,
            "lists": lists,
            "orphans": [_json_key(k) for k in self._orphans],
            "objects": objects,
        }

    def dumps(self, **kwargs) -> str:
        return json.dumps(self.snapshot(), **kwargs)

    def check_invariants(self) -> None:
        """Recompute all bookkeeping from scratch and assert it matches."""
        scale = self._scale
        vlen = [0] * self.num_proxies
        used = 0
        memberships = 0
        for key, rec in self._store.items():
            used += rec.length
            for j in rec.share_set:
                assert key in self._lists[j], (key, j)
                vlen[j] += rec.length * scale // len(rec.share_set)
            if rec.share_set:
                assert rec._charged * len(rec.share_set) == rec.length * scale
            assert rec.orphan == (not rec.share_set), key
            assert rec.orphan == (key in self._orphans), key
        for j, lst in enumerate(self._lists):
            for key in lst:
                assert j in self._store[key].share_set, (key, j)
            memberships += len(lst)
        assert vlen == self._vlen, (vlen, self._vlen)
        assert used == self._used, (used, self._used)
        assert used <= self.capacity
        assert memberships == self._memberships
        for j in range(self.num_proxies):
            assert self._vlen[j] <= self._ripple[j], j


def _json_key(key):
    if isinstance(key, bytes):
        return key.decode("utf-8", "backslashreplace")
    if isinstance(key, (int, str)):
        return key
    return repr(key)


def new_cache(physical_capacity: int, allocations: Iterable, mode: Mode | str = Mode.STANDARD,
              ripple_thresholds: Iterable | None = None) -> SharedCache:
    return SharedCache(physical_capacity, list(allocations), Mode(mode),
                       None if ripple_thresholds is None else list(ripple_thresholds))
