import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sharedcache import (CacheError, CapacityExhausted, Mode, ObjectTooLarge, Outcome,
                         SharedCache, new_cache)

from _reference import ReferenceCache, random_instance, replay_both


def test_get_on_empty_cache_misses_without_inserting():
    c = SharedCache(10, [5, 5])
    assert c.get(0, "a").kind is Outcome.MISS
    assert c.stats()["objects"] == 0


def test_set_then_get_is_list_hit():
    c = SharedCache(10, [5, 5])
    assert c.set(0, "a", 2).kind is Outcome.MISS
    out = c.get(0, "a")
    assert out.kind is Outcome.LIST_HIT and out.num_evictions == 0


def test_get_from_other_proxy_shares_and_halves_attribution():
    c = SharedCache(10, [5, 5])
    c.set(0, "a", 2)
    assert c.get(1, "a").kind is Outcome.LIST_MISS_CACHE_HIT
    assert c.record("a").share_set == {0, 1}
    assert c.attribution(0, "a") == c.attribution(1, "a") == 1
    assert c.virtual_length(0) == c.virtual_length(1) == 1
    assert c.occupancy == 2


def test_three_way_share_is_exact():
    c = SharedCache(10, [5, 5, 5])
    c.set(0, "a", 1)
    c.get(1, "a")
    c.get(2, "a")
    assert c.attribution(2, "a") == Fraction(1, 3)
    assert sum(c.attribution(j, "a") for j in range(3)) == 1


def test_lru_order_and_tail_eviction():
    c = SharedCache(10, [3])
    for k in "abc":
        c.set(0, k, 1)
    c.get(0, "a")
    out = c.set(0, "d", 1)
    assert [(p, k) for p, k, _ in out.evictions] == [(0, "b")]
    assert c.keys(0) == ["d", "a", "c"]


def test_eviction_of_unshared_object_leaves_orphan():
    c = SharedCache(10, [2])
    c.set(0, "a", 1)
    c.set(0, "b", 1)
    c.set(0, "c", 1)
    assert c.orphans() == ["a"]
    assert c.record("a").orphan
    assert c.occupancy == 3
    # an orphan is still a cache hit for whoever asks
    assert c.get(0, "a").kind is Outcome.LIST_MISS_CACHE_HIT
    assert c.orphans() == ["b"]


def test_orphans_reclaimed_oldest_first():
    c = SharedCache(4, [2])
    for k in "abcd":
        c.set(0, k, 1)
    assert c.orphans() == ["a", "b"]
    out = c.set(0, "e", 1)
    assert out.evictions.physical_evictions == 1
    assert c.orphans() == ["b", "c"]
    assert c.occupancy == 4


def test_ripple_eviction_after_inflation():
    # a is shared by both lists; when list 0 drops it, list 1 pays full price
    c = SharedCache(20, [2, 2])
    c.set(0, "a", 2)
    c.get(1, "a")
    c.set(1, "x", 1)
    assert c.virtual_length(1) == 2
    out = c.set(0, "b", 2)
    entries = [(p, k) for p, k, _ in out.evictions]
    # list 1 now holds x (MRU) and a at full length 2, over its allocation
    assert entries == [(0, "a"), (1, "a")]
    assert c.orphans() == ["a"]
    c.check_invariants()


def test_rre_defers_ripple_until_threshold():
    std = SharedCache(20, [2, 2])
    rre = SharedCache(20, [2, 2], Mode.RRE, [3, 3])
    for c in (std, rre):
        c.set(0, "a", 2)
        c.get(1, "a")
        c.set(1, "x", 1)
        c.set(0, "b", 2)
    assert rre.keys(1) == ["x", "a"]
    assert rre.virtual_length(1) == 3
    assert std.virtual_length(1) <= 2
    # hits leave the list alone; proxy 1's next miss drains it to its allocation
    rre.get(1, "x")
    assert rre.virtual_length(1) == 3
    out = rre.set(1, "y", 1)
    assert [(p, k) for p, k, _ in out.evictions] == [(1, "a")]
    assert rre.virtual_length(1) == 2


def test_ripple_thresholds_validated():
    with pytest.raises(ValueError):
        SharedCache(10, [2, 2], Mode.STANDARD, [3, 3])
    with pytest.raises(ValueError):
        SharedCache(10, [2, 2], Mode.RRE, [1, 3])
    with pytest.raises(ValueError):
        SharedCache(10, [2, 2], Mode.RRE, [3])


@pytest.mark.parametrize("bad", [dict(physical_capacity=0, allocations=[1]),
                                 dict(physical_capacity=5, allocations=[]),
                                 dict(physical_capacity=5, allocations=[0, 1]),
                                 dict(physical_capacity=2.5, allocations=[1])])
def test_constructor_rejects(bad):
    with pytest.raises(ValueError):
        SharedCache(**bad)


def test_oversize_objects_rejected():
    c = SharedCache(10, [4, 20])
    with pytest.raises(ObjectTooLarge):
        c.set(0, "a", 5)
    with pytest.raises(ObjectTooLarge):
        c.set(1, "a", 11)
    assert isinstance(ObjectTooLarge("x"), ValueError)
    c.check_invariants()


def test_invalid_proxy_and_length():
    c = SharedCache(10, [4])
    with pytest.raises(IndexError):
        c.get(1, "a")
    with pytest.raises(IndexError):
        c.set(-1, "a", 1)
    with pytest.raises(ValueError):
        c.set(0, "a", 0)


def test_capacity_exhausted_drops_object():
    # virtual allocations exceed physical memory; the lone list member cannot fit
    c = SharedCache(4, [4, 4])
    c.set(0, "a", 3)
    c.get(1, "a")
    with pytest.raises(CapacityExhausted) as info:
        c.set(1, "b", 2)
    assert info.value.trace is not None
    assert "b" not in c.keys(1)
    with pytest.raises(KeyError):
        c.record("b")
    c.check_invariants()


def test_overwrite_changes_length_and_reattributes():
    c = SharedCache(20, [6, 6])
    c.set(0, "a", 2)
    c.get(1, "a")
    out = c.set(1, "a", 4, value=b"new")
    assert out.kind is Outcome.LIST_HIT
    assert c.attribution(0, "a") == 2
    assert c.occupancy == 4
    assert c.record("a").value == b"new"
    c.set(0, "a", 1)
    assert c.occupancy == 1
    c.check_invariants()


def test_set_by_non_holder_is_list_miss_cache_hit():
    c = SharedCache(20, [6, 6])
    c.set(0, "a", 2)
    assert c.set(1, "a", 2).kind is Outcome.LIST_MISS_CACHE_HIT
    assert c.record("a").share_set == {0, 1}


def test_manual_primitives():
    c = SharedCache(20, [6, 6])
    c.set(0, "a", 2)
    c.get(1, "a")
    assert c.evict_tail(0) == ("a", False)
    assert c.attribution(1, "a") == 2
    assert c.evict_tail(1) == ("a", True)
    with pytest.raises(CacheError):
        c.evict_tail(1)
    assert c.reclaim_orphans(20) == 1
    assert c.occupancy == 0
    with pytest.raises(ValueError):
        c.reclaim_orphans(-1)
    assert not c.rebalance().entries


def test_snapshot_is_json_and_complete():
    c = new_cache(20, [Fraction(7, 2), 6], "standard")
    c.set(0, "a", 3)
    c.get(1, "a")
    snap = json.loads(c.dumps())
    assert snap["version"] == 1 and snap["capacity"] == 20
    assert snap["lists"][0]["allocation"] == "7/2"
    assert snap["lists"][1]["attributions"] == ["3/2"]
    assert snap["objects"] == [{"key": "a", "length": 3, "share_set": [0, 1], "orphan": False}]


def test_stats_fields():
    c = SharedCache(20, [6, 6])
    c.set(0, "a", 2)
    st = c.stats()
    assert st == {"virtual_lengths": [2, 0], "occupancy": 2, "orphan_count": 0,
                  "list_sizes": [1, 0], "objects": 1}


@pytest.mark.parametrize("seed", range(20))
def test_matches_reference(seed):
    rng = np.random.default_rng(seed)
    capacity, allocs, mode, ripple, ops = random_instance(rng)
    replay_both(SharedCache(capacity, allocs, Mode(mode), ripple),
                ReferenceCache(capacity, allocs, ripple), ops)


op = st.tuples(st.sampled_from(["get", "set"]), st.integers(0, 2), st.integers(0, 6),
               st.integers(1, 5))


@given(capacity=st.integers(3, 20),
       allocs=st.lists(st.integers(2, 10), min_size=3, max_size=3),
       extra=st.lists(st.integers(0, 3), min_size=3, max_size=3),
       rre=st.booleans(),
       ops=st.lists(op, max_size=120))
def test_invariants_hold_after_every_request(capacity, allocs, extra, rre, ops):
    ripple = [b + e for b, e in zip(allocs, extra)] if rre else None
    c = SharedCache(capacity, allocs, Mode.RRE if rre else Mode.STANDARD, ripple)
    for kind, p, k, length in ops:
        try:
            if kind == "get":
                c.get(p, k)
            else:
                c.set(p, k, length)
        except (ObjectTooLarge, CapacityExhausted):
            pass
        c.check_invariants()
        assert c.virtual_length(p) <= c.allocations[p]
        assert c.occupancy <= capacity
        for key in set(sum((c.keys(j) for j in range(3)), [])):
            rec = c.record(key)
            assert sum(c.attribution(j, key) for j in rec.share_set) == rec.length


@given(ops=st.lists(op, max_size=80))
def test_reference_equivalence_property(ops):
    script = [(kind, p, k, length if kind == "set" else None) for kind, p, k, length in ops]
    replay_both(SharedCache(12, [4, 5, 6]), ReferenceCache(12, [4, 5, 6]), script)
