# Walk through a small shared cache by hand, then check the working-set
# approximation against a simulation and against unshared caches.
import numpy as np

from sharedcache import (CacheConfig, Rule, SharedCache, WorkloadSpec, run_coupled_dominance,
                         run_simulation, solve, solve_unshared)

# three proxies, 6 units each, 12 units of real memory
cache = SharedCache(12, [6, 6, 6])
cache.set(0, "a", 3)
print(cache.get(1, "a").kind)           # proxy 1 finds it physically cached
print(cache.virtual_length(0), cache.virtual_length(1))   # 3/2 each, the object is split
cache.set(2, "b", 6)
cache.set(2, "c", 4)                     # list 2 overflows, its tail "b" goes
print(cache.stats())

# Zipf demand, alpha differs per proxy
spec = WorkloadSpec(1000, 3, [0.75, 0.5, 1.0], request_count=600_000, seed=1)
R, ell = spec.rate_matrix(), spec.object_lengths()
b = [8, 64, 8]

exact = solve(b, ell, R, Rule.EXACT)
ratio = solve(b, ell, R, Rule.RATIO)
alone = solve_unshared(b, ell, R)
sim = run_simulation(spec, CacheConfig(1000, b), warmup_fraction=0.2)

ranks = np.array([1, 10, 100])
print("rank  exact   ratio   unshared  simulated")
for i in range(3):
    for k in ranks:
        print(i, k, *(f"{x[i, k - 1]:.4f}" for x in (exact.h, ratio.h, alone.h, sim.residency_prob)))

# sharing never hurts: same requests through both systems, event by event
dom = run_coupled_dominance(WorkloadSpec(1000, 3, [0.75, 0.5, 1.0], request_count=50_000, seed=2),
                            b, capacity=1000)
print("shared hits  ", dom.shared_hits)
print("unshared hits", dom.unshared_hits)
