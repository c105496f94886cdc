"""Compiled replay of IRM traces against the shared cache.

Mirrors :class:`sharedcache.core.SharedCache` for the request pattern the
simulator produces (``get``, and ``set`` with the object's fixed length on a
miss) over integer keys ``0..N-1``.  Equality with the pure-Python engine is
checked in the test suite; keep the two in step when changing either.
"""

from __future__ import annotations

import numpy as np
from numba import njit

NIL = -1
MAX_EVICTIONS = 64        # histogram bins; the last bin collects the overflow

OK = 0
ERR_TOO_LARGE = 1
ERR_CAPACITY = 2


class KernelState:
    """Array form of a :class:`SharedCache` holding integer keys."""

    def __init__(self, num_proxies: int, lengths: np.ndarray, alloc_scaled, ripple_scaled,
                 capacity: int, scale: int):
        J, N = num_proxies, lengths.size
        self.lengths = np.ascontiguousarray(lengths, dtype=np.int64)
        self.alloc = np.asarray(alloc_scaled, dtype=np.int64)
        self.ripple = np.asarray(ripple_scaled, dtype=np.int64)
        self.capacity = int(capacity)
        self.scale = int(scale)
        self.nxt = np.full((J, N), NIL, dtype=np.int64)   # towards the tail
        self.prv = np.full((J, N), NIL, dtype=np.int64)   # towards the head
        self.head = np.full(J, NIL, dtype=np.int64)
        self.tail = np.full(J, NIL, dtype=np.int64)
        self.member = np.zeros((J, N), dtype=np.bool_)
        self.size = np.zeros(J, dtype=np.int64)
        self.vlen = np.zeros(J, dtype=np.int64)
        self.count = np.zeros(N, dtype=np.int64)
        self.charged = np.zeros(N, dtype=np.int64)
        self.stored = np.zeros(N, dtype=np.bool_)
        self.orphan_next = np.full(N, NIL, dtype=np.int64)
        self.orphan_prev = np.full(N, NIL, dtype=np.int64)
        # scalars: used, memberships, orphan head (oldest), orphan tail
        self.scalars = np.array([0, 0, NIL, NIL], dtype=np.int64)
        self.entered = np.zeros((J, N), dtype=np.int64)

    def list_keys(self, proxy: int) -> list[int]:
        out = []
        k = self.head[proxy]
        while k != NIL:
            out.append(int(k))
            k = self.nxt[proxy, k]
        return out

    def orphan_keys(self) -> list[int]:
        out = []
        k = self.scalars[2]
        while k != NIL:
            out.append(int(k))
            k = self.orphan_next[k]
        return out


class KernelStats:
    def __init__(self, num_proxies: int, num_objects: int):
        J, N = num_proxies, num_objects
        self.requests = np.zeros((J, N), dtype=np.int64)
        self.hits = np.zeros((J, N), dtype=np.int64)
        self.residency = np.zeros((J, N), dtype=np.int64)
        self.kinds = np.zeros((J, 3), dtype=np.int64)     # list hit, list miss cache hit, miss
        self.set_hist = np.zeros(MAX_EVICTIONS + 1, dtype=np.int64)
        self.insert_hist = np.zeros(MAX_EVICTIONS + 1, dtype=np.int64)
        self.ripple_hist = np.zeros(MAX_EVICTIONS + 1, dtype=np.int64)


@njit(cache=True)
def _link_head(s_nxt, s_prv, head, tail, i, k):
    h = head[i]
    s_prv[i, k] = NIL
    s_nxt[i, k] = h
    if h != NIL:
        s_prv[i, h] = k
    else:
        tail[i] = k
    head[i] = k


@njit(cache=True)
def _unlink(s_nxt, s_prv, head, tail, i, k):
    p = s_prv[i, k]
    n = s_nxt[i, k]
    if p != NIL:
        s_nxt[i, p] = n
    else:
        head[i] = n
    if n != NIL:
        s_prv[i, n] = p
    else:
        tail[i] = p
    s_nxt[i, k] = NIL
    s_prv[i, k] = NIL


@njit(cache=True)
def _reattribute(k, lengths, count, charged, member, vlen, scale):
    c = count[k]
    if c == 0:
        charged[k] = lengths[k] * scale
        return
    new = lengths[k] * scale // c
    delta = new - charged[k]
    if delta != 0:
        for j in range(vlen.size):
            if member[j, k]:
                vlen[j] += delta
        charged[k] = new


@njit(cache=True)
def _orphan_push(k, onext, oprev, sc):
    onext[k] = NIL
    oprev[k] = sc[3]
    if sc[3] != NIL:
        onext[sc[3]] = k
    else:
        sc[2] = k
    sc[3] = k


@njit(cache=True)
def _orphan_remove(k, onext, oprev, sc):
    p = oprev[k]
    n = onext[k]
    if p != NIL:
        onext[p] = n
    else:
        sc[2] = n
    if n != NIL:
        oprev[n] = p
    else:
        sc[3] = p
    onext[k] = NIL
    oprev[k] = NIL


@njit(cache=True)
def _leave_residency(entered, residency, i, k, step, warmup):
    start = entered[i, k]
    if start < warmup:
        start = warmup
    if step >= start:
        residency[i, k] += step - start + 1


@njit(cache=True)
def _evict_tail(i, step, warmup, lengths, nxt, prv, head, tail, member, size, vlen, count,
                charged, stored, onext, oprev, sc, entered, residency, scale):
    k = tail[i]
    _unlink(nxt, prv, head, tail, i, k)
    member[i, k] = False
    size[i] -= 1
    count[k] -= 1
    vlen[i] -= charged[k]
    sc[1] -= 1
    _leave_residency(entered, residency, i, k, step, warmup)
    if count[k] > 0:
        _reattribute(k, lengths, count, charged, member, vlen, scale)
    else:
        charged[k] = lengths[k] * scale
        _orphan_push(k, onext, oprev, sc)
    return k


@njit(cache=True)
def _rebalance(primary, origin, step, warmup, lengths, nxt, prv, head, tail, member, size,
               vlen, count, charged, stored, onext, oprev, sc, entered, residency, scale,
               alloc, ripple, tally):
    # tally[0] counts evictions from lists other than ``origin``
    J = vlen.size
    evictions = 0
    budget = sc[1]
    while True:
        best = -1
        worst = 0
        for j in range(J):
            if j == primary:
                over = vlen[j] - alloc[j]
            else:
                over = vlen[j] - ripple[j]
            if over > worst:
                best = j
                worst = over
        if best < 0:
            return evictions
        if budget <= 0:
            return -1
        budget -= 1
        _evict_tail(best, step, warmup, lengths, nxt, prv, head, tail, member, size, vlen,
                    count, charged, stored, onext, oprev, sc, entered, residency, scale)
        evictions += 1
        if best != origin:
            tally[0] += 1


@njit(cache=True)
def _join(i, k, step, lengths, nxt, prv, head, tail, member, size, vlen, count, charged,
          sc, entered, scale):
    member[i, k] = True
    count[k] += 1
    vlen[i] += charged[k]
    _reattribute(k, lengths, count, charged, member, vlen, scale)
    _link_head(nxt, prv, head, tail, i, k)
    size[i] += 1
    sc[1] += 1
    entered[i, k] = step + 1


@njit(cache=True)
def _reclaim(needed, capacity, lengths, stored, onext, oprev, sc):
    while capacity - sc[0] < needed and sc[2] != NIL:
        k = sc[2]
        _orphan_remove(k, onext, oprev, sc)
        stored[k] = False
        sc[0] -= lengths[k]


@njit(cache=True)
def replay(proxies, keys, base, warmup, rre, lengths, alloc, ripple, capacity, scale,
           nxt, prv, head, tail, member, size, vlen, count, charged, stored, onext, oprev,
           sc, entered, residency, requests, hits, kinds, set_hist, insert_hist,
           ripple_hist, last_evictions):
    """Replay ``(proxies[s], keys[s])``; global step of event ``s`` is ``base + s``.

    Returns ``(status, index)``: ``status`` is OK or an error code with the
    failing event index.  ``last_evictions[s]`` receives the number of list
    evictions caused by event ``s`` (-1 for a plain list hit), which lets
    tests compare against the engine event by event.
    """
    n = proxies.size
    top = set_hist.size - 1
    tally = np.zeros(1, dtype=np.int64)
    for s in range(n):
        i = proxies[s]
        k = keys[s]
        step = base + s
        counted = step >= warmup
        if counted:
            requests[i, k] += 1
        if member[i, k]:
            # list hit: promote to head
            if head[i] != k:
                _unlink(nxt, prv, head, tail, i, k)
                _link_head(nxt, prv, head, tail, i, k)
            if counted:
                hits[i, k] += 1
                kinds[i, 0] += 1
            last_evictions[s] = -1
            continue
        primary = i if rre else -1
        tally[0] = 0
        if stored[k]:
            # list miss, cache hit: the get adopts the object
            if count[k] == 0:
                _orphan_remove(k, onext, oprev, sc)
            _join(i, k, step, lengths, nxt, prv, head, tail, member, size, vlen, count,
                  charged, sc, entered, scale)
            ev = _rebalance(primary, i, step, warmup, lengths, nxt, prv, head, tail, member,
                            size, vlen, count, charged, stored, onext, oprev, sc, entered,
                            residency, scale, alloc, ripple, tally)
            if ev < 0:
                return ERR_CAPACITY, s
            if counted:
                kinds[i, 1] += 1
                insert_hist[min(ev, top)] += 1
            last_evictions[s] = ev
            continue
        # miss: the client fetches and sets the object
        ell = lengths[k]
        if ell > capacity or ell * scale > alloc[i]:
            return ERR_TOO_LARGE, s
        stored[k] = True
        charged[k] = ell * scale
        _join(i, k, step, lengths, nxt, prv, head, tail, member, size, vlen, count, charged,
              sc, entered, scale)
        ev = _rebalance(primary, i, step, warmup, lengths, nxt, prv, head, tail, member, size,
                        vlen, count, charged, stored, onext, oprev, sc, entered, residency,
                        scale, alloc, ripple, tally)
        if ev < 0:
            return ERR_CAPACITY, s
        _reclaim(ell, capacity, lengths, stored, onext, oprev, sc)
        while capacity - sc[0] < ell:
            if size[i] <= 1:
                return ERR_CAPACITY, s
            _evict_tail(i, step, warmup, lengths, nxt, prv, head, tail, member, size, vlen,
                        count, charged, stored, onext, oprev, sc, entered, residency, scale)
            ev += 1
            more = _rebalance(primary, i, step, warmup, lengths, nxt, prv, head, tail, member,
                              size, vlen, count, charged, stored, onext, oprev, sc, entered,
                              residency, scale, alloc, ripple, tally)
            if more < 0:
                return ERR_CAPACITY, s
            ev += more
            _reclaim(ell, capacity, lengths, stored, onext, oprev, sc)
        sc[0] += ell
        if counted:
            kinds[i, 2] += 1
            set_hist[min(ev, top)] += 1
            insert_hist[min(ev, top)] += 1
            ripple_hist[min(tally[0], top)] += 1
        last_evictions[s] = ev
    return OK, n


@njit(cache=True)
def close_residency(end, warmup, member, entered, residency):
    """Credit objects still resident at the end of the run."""
    J, N = member.shape
    for i in range(J):
        for k in range(N):
            if member[i, k]:
                _leave_residency(entered, residency, i, k, end - 1, warmup)


def run_chunk(state: KernelState, stats: KernelStats, proxies, keys, base: int, warmup: int,
              rre: bool):
    last = np.empty(proxies.size, dtype=np.int64)
    st = state
    status, index = replay(
        np.ascontiguousarray(proxies, dtype=np.int64), np.ascontiguousarray(keys, dtype=np.int64),
        base, warmup, rre, st.lengths, st.alloc, st.ripple, st.capacity, st.scale,
        st.nxt, st.prv, st.head, st.tail, st.member, st.size, st.vlen, st.count, st.charged,
        st.stored, st.orphan_next, st.orphan_prev, st.scalars, st.entered, stats.residency,
        stats.requests, stats.hits, stats.kinds, stats.set_hist, stats.insert_hist,
        stats.ripple_hist, last)
    return status, index, last


# -- independent (unshared) LRU lists ------------------------------------

@njit(cache=True)
def replay_unshared(proxies, keys, base, warmup, lengths, capacity_scaled, scale, nxt, prv,
                    head, tail, member, used, entered, residency, requests, hits):
    """Each proxy runs a plain LRU charged full lengths; capacities scaled by ``scale``."""
    for s in range(proxies.size):
        i = proxies[s]
        k = keys[s]
        step = base + s
        counted = step >= warmup
        if counted:
            requests[i, k] += 1
        if member[i, k]:
            if head[i] != k:
                _unlink(nxt, prv, head, tail, i, k)
                _link_head(nxt, prv, head, tail, i, k)
            if counted:
                hits[i, k] += 1
            continue
        ell = lengths[k] * scale
        if ell > capacity_scaled[i]:
            return ERR_TOO_LARGE, s
        member[i, k] = True
        _link_head(nxt, prv, head, tail, i, k)
        used[i] += ell
        entered[i, k] = step + 1
        while used[i] > capacity_scaled[i]:
            t = tail[i]
            _unlink(nxt, prv, head, tail, i, t)
            member[i, t] = False
            used[i] -= lengths[t] * scale
            _leave_residency(entered, residency, i, t, step, warmup)
    return OK, proxies.size
