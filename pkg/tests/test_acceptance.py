"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line; the lines are repeated in a summary
section at the end of the pytest run.
"""

import itertools
import time

import numpy as np
import pytest

from sharedcache import (CacheConfig, CapacityExhausted, Mode, ObjectTooLarge, Rule, SharedCache,
                         WorkloadSpec, expected_inverse_share, residuals, run_coupled_dominance,
                         run_simulation, solve)

from _reference import ReferenceCache, random_instance, replay_both

pytestmark = pytest.mark.acceptance

ALPHAS = [0.75, 0.5, 1.0]
GRID = [list(b) for b in itertools.product([8, 64], repeat=3)]
RANKS = [1, 10, 100, 1000]


def test_criterion_1_approximation_matches_simulation(verdict):
    # N = 10^4 objects, 3.75e6 events of which 3e6 follow the 20% warm-up
    N, events = 10_000, 3_750_000
    started = time.perf_counter()
    spec = WorkloadSpec(N, 3, ALPHAS, request_count=events, seed=1)
    rates, ell = spec.rate_matrix(), spec.object_lengths()
    worst_rel, failures, observed = 0.0, [], []
    for b in GRID:
        pred = solve(b, ell, rates, Rule.EXACT).h
        rep = run_simulation(spec, CacheConfig(1000, b), warmup_fraction=0.2)
        observed.append(rep.observed)
        sim = rep.residency_prob
        for i in range(3):
            for k in RANKS:
                p, s = pred[i, k - 1], sim[i, k - 1]
                rel = abs(s - p) / p
                ok = rel <= 0.15 or (p < 0.05 and abs(s - p) <= 0.005)
                worst_rel = max(worst_rel, rel)
                if not ok:
                    failures.append((b, i, k, p, s))
    elapsed = time.perf_counter() - started
    ok = not failures and min(observed) >= 3_000_000 and elapsed < 300
    verdict(1, "approximation vs simulation", ok,
            f"96 cells, max rel err {worst_rel:.3f}, {len(failures)} outside tolerance, "
            f"{min(observed)} post-warm-up requests per config, {elapsed:.0f}s")
    assert not failures, failures
    assert min(observed) >= 3_000_000
    assert elapsed < 300


def test_criterion_2_sharing_dominates_unshared(verdict):
    details, ok = [], True
    for b in GRID:
        spec = WorkloadSpec(1000, 3, ALPHAS, request_count=100_000, seed=1)
        rep = run_coupled_dominance(spec, b, capacity=1000, full_check_every=1000)
        better = rep.strictly_better
        ok &= rep.dominates and bool(better) and rep.events == 100_000
        gain = (rep.shared_hits - rep.unshared_hits) / np.maximum(rep.unshared_hits, 1)
        details.append(f"{'/'.join(map(str, b))}: +{gain.max():.1%}")
    # a DominanceViolation would already have been raised during the run
    verdict(2, "shared lists dominate unshared caches", ok,
            "subset relation held at every event; best per-proxy gain " + ", ".join(details))
    assert ok


def ripple_workload(seed=1, requests=375_000):
    spec = WorkloadSpec(10_000, 9, [0.5 + 0.5 * i for i in range(9)],
                        request_count=requests, seed=seed)
    allocs = [10 * r for r in (1, 1, 1, 2, 2, 2, 7, 7, 7)]
    return spec, allocs


def test_criterion_3_ripple_overhead(verdict):
    started = time.perf_counter()
    spec, allocs = ripple_workload()
    rep = run_simulation(spec, CacheConfig(300, allocs), 0.2)
    elapsed = time.perf_counter() - started
    support = rep.histogram_support()
    frac = rep.multi_eviction_fraction
    ok = set(support) <= set(range(10)) and 0.05 <= frac <= 0.30 and elapsed < 120
    verdict(3, "ripple overhead", ok,
            f"{rep.sets} sets, support {support}, multi-eviction fraction {frac:.4f}, "
            f"{elapsed:.1f}s")
    assert set(support) <= set(range(10))
    assert 0.05 <= frac <= 0.30
    assert elapsed < 120


def test_criterion_4_two_proxy_bracket(verdict):
    spec = WorkloadSpec(2000, 2, [0.75, 1.0], request_count=5_000_000, seed=1)
    rates, ell = spec.rate_matrix(), spec.object_lengths()
    lower = solve([32, 32], ell, rates, Rule.EXACT).h
    upper = solve([32, 32], ell, rates, Rule.RATIO).h
    sim = run_simulation(spec, CacheConfig(200, [32, 32]), 0.2).residency_prob
    below = [(i, k) for i in range(2) for k in range(1, 11) if sim[i, k - 1] < lower[i, k - 1]]
    above = [(i, k) for i in range(2) for k in range(1, 11) if sim[i, k - 1] > upper[i, k - 1]]
    gap = max(lower[i, k - 1] - sim[i, k - 1] for i in range(2) for k in range(1, 11))
    ok = not below and not above
    verdict(4, "two-proxy bracket", ok,
            f"{20 - len(below) - len(above)}/20 inside; below exact-rule prediction at "
            f"{below} by up to {gap:.4f}; above ratio-rule prediction at {above}")
    assert not above
    assert not below


def test_criterion_5_oracle_equivalence(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for m in range(13):
        patterns = np.array(list(itertools.product([0, 1], repeat=m)), dtype=float).reshape(2 ** m, m)
        weights = 1.0 / (1.0 + patterns.sum(axis=1))
        for n in range(1000):
            p = rng.random(m)
            if n % 10 == 0 and m:
                p[rng.integers(m)] = float(rng.integers(2))   # exact 0 or 1 entries
            probs = np.prod(np.where(patterns == 1, p, 1.0 - p), axis=1)
            worst = max(worst, abs(expected_inverse_share(p) - probs @ weights))
    rng = np.random.default_rng(55)
    mismatches = 0
    for _ in range(500):
        capacity, allocs, mode, ripple, ops = random_instance(rng)
        try:
            replay_both(SharedCache(capacity, allocs, Mode(mode), ripple),
                        ReferenceCache(capacity, allocs, ripple), ops)
        except AssertionError:
            mismatches += 1
    ok = worst <= 1e-12 and mismatches == 0
    verdict(5, "oracle equivalence", ok,
            f"inverse-share max error {worst:.2e} over m<=12 x 1000 vectors; "
            f"{mismatches}/500 engine instances differ from the reference")
    assert worst <= 1e-12
    assert mismatches == 0


def test_criterion_6_solver_soundness(verdict):
    spec = WorkloadSpec(1000, 3, ALPHAS)
    rates, ell = spec.rate_matrix(), spec.object_lengths()
    rng = np.random.default_rng(6)
    worst_res, worst_spread = 0.0, 0.0
    for b in GRID:
        base = solve(b, ell, rates)
        worst_res = max(worst_res, np.max(np.abs(residuals(base.t, b, ell, rates))))
        for _ in range(10):
            t0 = rng.uniform(0.0, 20.0 * base.t.max(), 3)
            other = solve(b, ell, rates, t0=t0)
            worst_spread = max(worst_spread, np.max(np.abs(other.t - base.t)))
    sym = WorkloadSpec(1000, 4, [0.8] * 4).rate_matrix()
    t_sym = solve([30] * 4, ell, sym, t0=[1.0, 100.0, 10.0, 1000.0]).t
    symmetric = bool(np.all(t_sym == t_sym[0]))
    ok = worst_res <= 1e-9 and worst_spread <= 1e-8 and symmetric
    verdict(6, "solver soundness", ok,
            f"max residual {worst_res:.1e}, restart spread {worst_spread:.1e}, "
            f"symmetric times equal: {symmetric}")
    assert worst_res <= 1e-9
    assert worst_spread <= 1e-8
    assert symmetric


def test_criterion_7_invariants_under_random_operations(verdict):
    rng = np.random.default_rng(7)
    total_ops, violations, rejected, exhausted = 0, 0, 0, 0
    while total_ops < 1_000_000:
        J = int(rng.integers(1, 6))
        n_obj = int(rng.integers(2, 31))
        allocs = [int(rng.integers(3, 16)) for _ in range(J)]
        capacity = int(rng.integers(max(allocs), sum(allocs) + 10))
        rre = bool(rng.integers(2))
        ripple = [b + int(rng.integers(0, 4)) for b in allocs] if rre else None
        cache = SharedCache(capacity, allocs, Mode.RRE if rre else Mode.STANDARD, ripple)
        procs = rng.integers(0, J, 1000)
        keys = rng.integers(0, n_obj, 1000)
        kinds = rng.random(1000) < 0.5
        lengths = rng.integers(1, 6, 1000)
        for p, k, is_get, ell in zip(procs.tolist(), keys.tolist(), kinds.tolist(),
                                     lengths.tolist()):
            members = sum(cache.stats()["list_sizes"])
            try:
                out = cache.get(p, k) if is_get else cache.set(p, k, ell)
                trace = out.evictions
            except ObjectTooLarge:
                rejected += 1
                trace = None
            except CapacityExhausted as exc:
                exhausted += 1
                trace = exc.trace
            total_ops += 1
            try:
                cache.check_invariants()
                assert cache.occupancy <= capacity
                assert cache.virtual_length(p) <= cache.threshold(p)
                if trace is not None:
                    assert len(trace.entries) <= members + 1
                try:
                    rec = cache.record(k)
                except KeyError:
                    continue
                if rec.share_set:
                    assert sum(cache.attribution(j, k) for j in rec.share_set) == rec.length
            except AssertionError:
                violations += 1
    ok = violations == 0
    verdict(7, "invariant suite", ok,
            f"{total_ops} operations, {violations} violations "
            f"({rejected} oversize rejections, {exhausted} capacity exhaustions exercised)")
    assert violations == 0


def test_criterion_8_rre_effectiveness(verdict):
    spec, allocs = ripple_workload()
    std = run_simulation(spec, CacheConfig(300, allocs, Mode.STANDARD), 0.2)
    ripple = [1.1 * b for b in allocs]
    rre = run_simulation(spec, CacheConfig(300, allocs, Mode.RRE, ripple), 0.2)
    f_std, f_rre = std.multi_eviction_fraction, rre.multi_eviction_fraction
    # h at the report ranks plus each proxy's aggregate hit ratio; objects a proxy
    # almost never requests have single-insertion residency estimates and are only printed
    cols = [k - 1 for k in RANKS]
    h_diff = float(np.nanmax(np.abs(rre.residency_prob[:, cols] - std.residency_prob[:, cols])))
    agg_diff = float(np.nanmax(np.abs(rre.proxy_hit_ratio() - std.proxy_hit_ratio())))
    all_diff = float(np.nanmax(np.abs(rre.residency_prob - std.residency_prob)))
    fraction_ok = f_rre <= f_std
    hits_ok = h_diff <= 0.02 and agg_diff <= 0.02
    verdict(8, "RRE effectiveness", fraction_ok and hits_ok,
            f"multi-eviction fraction RRE {f_rre:.4f} vs standard {f_std:.4f} "
            f"[{'ok' if fraction_ok else 'not reduced'}]; mean ripple evictions per set "
            f"{rre.mean_ripple_per_set:.5f} vs {std.mean_ripple_per_set:.5f}; "
            f"hit-probability difference {h_diff:.4f} at ranks {RANKS}, {agg_diff:.4f} per proxy "
            f"[{'ok' if hits_ok else 'too large'}], {all_diff:.4f} over all objects")
    assert hits_ok
    assert fraction_ok
