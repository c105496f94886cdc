"""IRM workloads and trace-driven simulation of the shared cache."""

from __future__ import annotations

import csv
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import _kernel
from .core import CapacityExhausted, Mode, ObjectTooLarge, Outcome, SharedCache

CHUNK = 1 << 20


def zipf_weights(num_objects: int, alpha: float) -> np.ndarray:
    """Normalized Zipf popularities ``w_k ~ k**-alpha`` for ranks ``1..N``."""
    if num_objects < 1:
        raise ValueError("need at least one object")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    w = np.arange(1, num_objects + 1, dtype=float) ** -float(alpha)
    return w / w.sum()


@dataclass
class WorkloadSpec:
    """Independent-reference workload for ``num_proxies`` proxies.

    ``popularity`` holds one entry per proxy: a float is a Zipf exponent, a
    sequence is an explicit weight vector over the ``num_objects`` ranks.
    ``lengths`` is a single integer (all objects alike) or one per object.
    """

    num_objects: int
    num_proxies: int
    popularity: Sequence
    lengths: int | Sequence[int] = 1
    rates: Sequence[float] | None = None
    request_count: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.num_objects < 1 or self.num_proxies < 1:
            raise ValueError("need at least one object and one proxy")
        if len(self.popularity) != self.num_proxies:
            raise ValueError("one popularity entry per proxy is required")
        if self.rates is not None and (len(self.rates) != self.num_proxies
                                       or min(self.rates) <= 0):
            raise ValueError("rates must be positive, one per proxy")
        if self.request_count < 0:
            raise ValueError("request_count must be nonnegative")
        lens = self.object_lengths()
        if lens.shape != (self.num_objects,) or np.any(lens < 1):
            raise ValueError("object lengths must be positive integers, one per object")

    def weights(self) -> np.ndarray:
        """``J x N`` popularity matrix, rows normalized."""
        rows = []
        for entry in self.popularity:
            if isinstance(entry, (int, float)):
                rows.append(zipf_weights(self.num_objects, float(entry)))
            else:
                w = np.asarray(entry, dtype=float)
                if w.shape != (self.num_objects,) or np.any(w < 0) or w.sum() <= 0:
                    raise ValueError("explicit weights must be nonnegative with positive sum")
                rows.append(w / w.sum())
        return np.vstack(rows)

    def proxy_probabilities(self) -> np.ndarray:
        r = np.ones(self.num_proxies) if self.rates is None else np.asarray(self.rates, float)
        return r / r.sum()

    def object_lengths(self) -> np.ndarray:
        if isinstance(self.lengths, (int, np.integer)):
            return np.full(self.num_objects, int(self.lengths), dtype=np.int64)
        return np.asarray(self.lengths, dtype=np.int64)

    def rate_matrix(self) -> np.ndarray:
        """Per-event request rates ``lambda[i, k]`` implied by this workload."""
        return self.proxy_probabilities()[:, None] * self.weights()


class TraceEvent(NamedTuple):
    proxy: int
    key: int     # object rank, 1-based
    kind: str = "get"


def trace_chunks(spec: WorkloadSpec, chunk: int = CHUNK) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(proxies, keys)`` arrays with 0-based keys; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    pcdf = np.cumsum(spec.proxy_probabilities())
    cdfs = np.cumsum(spec.weights(), axis=1)
    cdfs[:, -1] = 1.0
    pcdf[-1] = 1.0
    remaining = spec.request_count
    while remaining > 0:
        n = min(chunk, remaining)
        proxies = np.searchsorted(pcdf, rng.random(n), side="right").astype(np.int64)
        u = rng.random(n)
        keys = np.empty(n, dtype=np.int64)
        for i in range(spec.num_proxies):
            sel = proxies == i
            keys[sel] = np.searchsorted(cdfs[i], u[sel], side="right")
        remaining -= n
        yield proxies, keys


def generate_trace(spec: WorkloadSpec) -> Iterator[TraceEvent]:
    for proxies, keys in trace_chunks(spec):
        for i, k in zip(proxies.tolist(), keys.tolist()):
            yield TraceEvent(i, k + 1)


@dataclass
class CacheConfig:
    capacity: int
    allocations: Sequence
    mode: Mode | str = Mode.STANDARD
    ripple_thresholds: Sequence | None = None

    def build(self) -> SharedCache:
        return SharedCache(self.capacity, list(self.allocations), Mode(self.mode),
                           None if self.ripple_thresholds is None else list(self.ripple_thresholds))


@dataclass
class SimReport:
    """Counters from one simulation, all taken after the warm-up boundary.

    ``hits / requests`` is the direct estimate of each hit probability.
    ``residency / observed`` estimates the same quantity from the fraction of
    events during which the object sat in the list; under the independent
    reference model a request sees the list in its time-average state, and
    this estimate has much lower variance for rarely requested objects.
    """

    requests: np.ndarray
    hits: np.ndarray
    residency: np.ndarray
    observed: int
    warmup: int
    kinds: np.ndarray
    set_histogram: np.ndarray
    insert_histogram: np.ndarray
    ripple_histogram: np.ndarray   # per set: evictions from lists other than the requester's

    @property
    def num_proxies(self) -> int:
        return self.requests.shape[0]

    @property
    def num_objects(self) -> int:
        return self.requests.shape[1]

    @property
    def hit_prob(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.requests > 0, self.hits / np.maximum(self.requests, 1), np.nan)

    @property
    def residency_prob(self) -> np.ndarray:
        if self.observed == 0:
            return np.full(self.requests.shape, np.nan)
        return self.residency / self.observed

    @property
    def sets(self) -> int:
        return int(self.set_histogram.sum())

    @property
    def multi_eviction_fraction(self) -> float:
        """Fraction of sets that caused more than one list eviction."""
        total = self.sets
        return float(self.set_histogram[2:].sum()) / total if total else 0.0

    @property
    def mean_evictions_per_set(self) -> float:
        total = self.sets
        bins = np.arange(self.set_histogram.size)
        return float(bins @ self.set_histogram) / total if total else 0.0

    @property
    def mean_ripple_per_set(self) -> float:
        total = self.sets
        bins = np.arange(self.ripple_histogram.size)
        return float(bins @ self.ripple_histogram) / total if total else 0.0

    def proxy_hit_ratio(self) -> np.ndarray:
        req = self.requests.sum(axis=1)
        return np.where(req > 0, self.hits.sum(axis=1) / np.maximum(req, 1), np.nan)

    def histogram_support(self) -> list[int]:
        return [int(n) for n in np.flatnonzero(self.set_histogram)]

    def same_as(self, other: "SimReport") -> bool:
        return (self.observed == other.observed and self.warmup == other.warmup
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("requests", "hits", "residency", "kinds",
                                  "set_histogram", "insert_histogram",
                                  "ripple_histogram")))

    # -- serialization ---------------------------------------------------

    def rows(self, ranks: Sequence[int] | None = None):
        ranks = range(1, self.num_objects + 1) if ranks is None else ranks
        hp, rp = self.hit_prob, self.residency_prob
        for i in range(self.num_proxies):
            for r in ranks:
                k = r - 1
                yield (i, r, int(self.requests[i, k]), int(self.hits[i, k]),
                       float(hp[i, k]), float(rp[i, k]))

    def write_csv(self, path, ranks=None, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["proxy", "object_rank", "requests", "hits", "hit_prob", "residency_prob"])
            for i, r, n, h, p, q in self.rows(ranks):
                w.writerow([i, r, n, h, _fmt(p), _fmt(q)])

    def write_histogram_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["evictions_per_set", "count"])
            last = max(self.histogram_support(), default=0)
            for n in range(last + 1):
                w.writerow([n, int(self.set_histogram[n])])

    def to_json(self, ranks=None) -> dict:
        return {
            "num_proxies": self.num_proxies,
            "num_objects": self.num_objects,
            "warmup_events": self.warmup,
            "observed_events": self.observed,
            "sets": self.sets,
            "multi_eviction_fraction": self.multi_eviction_fraction,
            "set_histogram": self.set_histogram[: max(self.histogram_support(), default=0) + 1].tolist(),
            "proxy_hit_ratio": [None if np.isnan(x) else float(x) for x in self.proxy_hit_ratio()],
            "outcomes": [
                {"list_hits": int(a), "list_miss_cache_hits": int(b), "misses": int(c)}
                for a, b, c in self.kinds
            ],
            "rows": [
                {"proxy": i, "object_rank": r, "requests": n, "hits": h,
                 "hit_prob": None if np.isnan(p) else p,
                 "residency_prob": None if np.isnan(q) else q}
                for i, r, n, h, p, q in self.rows(ranks)
            ],
        }


def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else repr(float(x))


def _empty_report(J: int, N: int, warmup: int = 0) -> SimReport:
    z = np.zeros((J, N), dtype=np.int64)
    bins = _kernel.MAX_EVICTIONS + 1
    return SimReport(z, z.copy(), z.copy(), 0, warmup, np.zeros((J, 3), dtype=np.int64),
                     np.zeros(bins, dtype=np.int64), np.zeros(bins, dtype=np.int64),
                     np.zeros(bins, dtype=np.int64))


def _warmup_events(spec: WorkloadSpec, warmup_fraction: float) -> int:
    if not 0 <= warmup_fraction < 1:
        raise ValueError("warmup_fraction must lie in [0, 1)")
    return int(spec.request_count * warmup_fraction)


def run_simulation(spec: WorkloadSpec, cache_config: CacheConfig, warmup_fraction: float = 0.2,
                   backend: str = "compiled", return_state: bool = False):
    """Replay ``spec``'s trace; every miss is followed by a ``set`` of the object.

    ``backend="compiled"`` runs the numba replay kernel, ``"engine"`` drives
    :class:`SharedCache` directly (slow; used to cross-check the kernel).
    With ``return_state`` the final cache snapshot is returned as well.
    """
    if len(cache_config.allocations) != spec.num_proxies:
        raise ValueError("cache configuration and workload disagree on the number of proxies")
    cache = cache_config.build()
    warmup = _warmup_events(spec, warmup_fraction)
    if backend == "engine":
        report, snap = _simulate_engine(spec, cache, warmup)
    elif backend == "compiled":
        report, snap = _simulate_compiled(spec, cache, warmup)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return (report, snap) if return_state else report


def _simulate_compiled(spec: WorkloadSpec, cache: SharedCache, warmup: int, per_event=None):
    J, N = spec.num_proxies, spec.num_objects
    state = _kernel.KernelState(J, spec.object_lengths(), cache._alloc, cache._ripple,
                                cache.capacity, cache.scale)
    stats = _kernel.KernelStats(J, N)
    rre = cache.mode is Mode.RRE
    base = 0
    for proxies, keys in trace_chunks(spec):
        status, index, last = _kernel.run_chunk(state, stats, proxies, keys, base, warmup, rre)
        if per_event is not None:
            per_event.append(last[:index])
        if status == _kernel.ERR_TOO_LARGE:
            raise ObjectTooLarge(f"event {base + index}: object rank {keys[index] + 1} "
                                 f"does not fit proxy {proxies[index]}'s allocation")
        if status == _kernel.ERR_CAPACITY:
            raise CapacityExhausted(f"event {base + index}: physical capacity exhausted")
        base += proxies.size
    total = base
    _kernel.close_residency(total, warmup, state.member, state.entered, stats.residency)
    report = SimReport(stats.requests, stats.hits, stats.residency, max(0, total - warmup),
                       warmup, stats.kinds, stats.set_hist, stats.insert_hist, stats.ripple_hist)
    return report, kernel_snapshot(state, cache)


def _simulate_engine(spec: WorkloadSpec, cache: SharedCache, warmup: int, per_event=None):
    J, N = spec.num_proxies, spec.num_objects
    report = _empty_report(J, N, warmup)
    lengths = spec.object_lengths().tolist()
    entered: dict[tuple[int, int], int] = {}
    top = _kernel.MAX_EVICTIONS
    residency = report.residency

    def leave(i, k, step):
        start = max(entered.pop((i, k)), warmup)
        if step >= start:
            residency[i, k] += step - start + 1

    step = 0
    get, set_ = cache.get, cache.set
    for proxies, keys in trace_chunks(spec):
        for i, k in zip(proxies.tolist(), keys.tolist()):
            counted = step >= warmup
            if counted:
                report.requests[i, k] += 1
            out = get(i, k)
            kind = out.kind
            if kind is Outcome.LIST_HIT:
                if counted:
                    report.hits[i, k] += 1
                    report.kinds[i, 0] += 1
                if per_event is not None:
                    per_event.append(-1)
                step += 1
                continue
            if kind is Outcome.MISS:
                out = set_(i, k, lengths[k])
            entered[(i, k)] = step + 1
            for j, key, _ in out.evictions.entries:
                leave(j, key, step)
            ev = len(out.evictions.entries)
            if counted:
                if kind is Outcome.MISS:
                    report.kinds[i, 2] += 1
                    report.set_histogram[min(ev, top)] += 1
                    ripple = sum(1 for j, _, _ in out.evictions.entries if j != i)
                    report.ripple_histogram[min(ripple, top)] += 1
                else:
                    report.kinds[i, 1] += 1
                report.insert_histogram[min(ev, top)] += 1
            if per_event is not None:
                per_event.append(ev)
            step += 1
    for (i, k) in list(entered):
        leave(i, k, step - 1)
    report.observed = max(0, step - warmup)
    return report, cache.snapshot()


def kernel_snapshot(state: "_kernel.KernelState", cache: SharedCache) -> dict:
    """Snapshot of a kernel state in the same shape as :meth:`SharedCache.snapshot`."""
    scale = state.scale
    lists = []
    for i in range(state.head.size):
        keys = state.list_keys(i)
        lists.append({
            "proxy": i,
            "allocation": str(cache.allocations[i]),
            "ripple_threshold": str(cache.ripple_thresholds[i]),
            "virtual_length": str(Fraction(int(state.vlen[i]), scale)),
            "keys": keys,
            "attributions": [str(Fraction(int(state.charged[k]), scale)) for k in keys],
        })
    objects = [
        {"key": int(k), "length": int(state.lengths[k]),
         "share_set": [int(j) for j in np.flatnonzero(state.member[:, k])],
         "orphan": bool(state.count[k] == 0)}
        for k in np.flatnonzero(state.stored)
    ]
    return {
        "version": 1,
        "capacity": state.capacity,
        "mode": cache.mode.value,
        "occupancy": int(state.scalars[0]),
        "lists": lists,
        "orphans": state.orphan_keys(),
        "objects": objects,
    }


def run_unshared_simulation(spec: WorkloadSpec, allocations: Sequence,
                            warmup_fraction: float = 0.2) -> SimReport:
    """Each proxy runs its own plain LRU of size ``b_i``, charged full lengths."""
    J, N = spec.num_proxies, spec.num_objects
    if len(allocations) != J:
        raise ValueError("one allocation per proxy is required")
    allocs = [Fraction(b) for b in allocations]
    scale = 1
    for b in allocs:
        scale = np.lcm(scale, b.denominator)
    cap = np.array([int(b * scale) for b in allocs], dtype=np.int64)
    lengths = spec.object_lengths()
    warmup = _warmup_events(spec, warmup_fraction)
    nxt = np.full((J, N), _kernel.NIL, dtype=np.int64)
    prv = nxt.copy()
    head = np.full(J, _kernel.NIL, dtype=np.int64)
    tail = head.copy()
    member = np.zeros((J, N), dtype=np.bool_)
    used = np.zeros(J, dtype=np.int64)
    entered = np.zeros((J, N), dtype=np.int64)
    report = _empty_report(J, N, warmup)
    base = 0
    for proxies, keys in trace_chunks(spec):
        status, index = _kernel.replay_unshared(
            proxies, keys, base, warmup, lengths, cap, int(scale), nxt, prv, head, tail,
            member, used, entered, report.residency, report.requests, report.hits)
        if status != _kernel.OK:
            raise ObjectTooLarge(f"event {base + index}: object larger than the proxy's cache")
        base += proxies.size
    _kernel.close_residency(base, warmup, member, entered, report.residency)
    report.observed = max(0, base - warmup)
    report.kinds[:, 0] = report.hits.sum(axis=1)
    report.kinds[:, 2] = report.requests.sum(axis=1) - report.kinds[:, 0]
    return report


# -- coupled shared / unshared run ----------------------------------------

class DominanceViolation(AssertionError):
    def __init__(self, event: int, proxy: int, key):
        super().__init__(f"event {event}: proxy {proxy}'s unshared cache holds {key!r} "
                         "but its shared list does not")
        self.event = event
        self.proxy = proxy
        self.key = key


@dataclass
class DominanceReport:
    events: int
    shared_hits: np.ndarray
    unshared_hits: np.ndarray
    requests: np.ndarray
    full_checks: int = 0

    @property
    def dominates(self) -> bool:
        return bool(np.all(self.shared_hits >= self.unshared_hits))

    @property
    def strictly_better(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.shared_hits > self.unshared_hits)]


class _PlainLRU:
    __slots__ = ("capacity", "used", "items")

    def __init__(self, capacity):
        self.capacity = Fraction(capacity)
        self.used = 0
        self.items: OrderedDict = OrderedDict()

    def request(self, key, length) -> bool:
        items = self.items
        if key in items:
            items.move_to_end(key)
            return True
        if length > self.capacity:
            return False
        items[key] = length
        self.used += length
        while self.used > self.capacity:
            _, ell = items.popitem(last=False)
            self.used -= ell
        return False


def run_coupled_dominance(spec: WorkloadSpec, allocations: Sequence, capacity: int | None = None,
                          full_check_every: int = 1000) -> DominanceReport:
    """Drive the shared cache and ``J`` independent LRUs with one trace.

    After every event the unshared cache of each proxy must be a subset of
    that proxy's shared list.  Only two things can break the relation in
    one event: the unshared cache admitting the requested key, and the
    shared lists dropping keys.  Both are checked at every event, which is
    equivalent to a full comparison; a full set comparison is also run
    every ``full_check_every`` events and at the end.
    """
    J = spec.num_proxies
    if len(allocations) != J:
        raise ValueError("one allocation per proxy is required")
    cap = capacity if capacity is not None else max(1, int(np.ceil(float(sum(
        Fraction(b) for b in allocations)))))
    shared = SharedCache(cap, list(allocations))
    plain = [_PlainLRU(b) for b in allocations]
    lengths = spec.object_lengths().tolist()
    shared_hits = np.zeros(J, dtype=np.int64)
    unshared_hits = np.zeros(J, dtype=np.int64)
    requests = np.zeros(J, dtype=np.int64)
    lists = shared._lists
    step = 0
    full = 0

    def full_check(event):
        for i in range(J):
            for key in plain[i].items:
                if key not in lists[i]:
                    raise DominanceViolation(event, i, key)

    for proxies, keys in trace_chunks(spec):
        for i, k in zip(proxies.tolist(), keys.tolist()):
            requests[i] += 1
            out = shared.get(i, k)
            if out.kind is Outcome.LIST_HIT:
                shared_hits[i] += 1
            elif out.kind is Outcome.MISS:
                out = shared.set(i, k, lengths[k])
            if plain[i].request(k, lengths[k]):
                unshared_hits[i] += 1
            if k in plain[i].items and k not in lists[i]:
                raise DominanceViolation(step, i, k)
            for j, key, _ in out.evictions.entries:
                if key in plain[j].items:
                    raise DominanceViolation(step, j, key)
            step += 1
            if full_check_every and step % full_check_every == 0:
                full_check(step - 1)
                full += 1
    full_check(step - 1)
    return DominanceReport(step, shared_hits, unshared_hits, requests, full + 1)


def estimate_rates(report: SimReport) -> np.ndarray:
    """Per-event request rates estimated from a report's request counts."""
    total = report.requests.sum()
    return report.requests / total if total else np.zeros_like(report.requests, dtype=float)
