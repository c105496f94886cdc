# How many evictions does one set cause? Nine proxies with very different
# skew share 300 units; compare the standard policy with ripple reduction.
import numpy as np

from sharedcache import CacheConfig, Mode, WorkloadSpec, run_simulation

spec = WorkloadSpec(10_000, 9, [0.5 + 0.5 * i for i in range(9)], request_count=375_000, seed=1)
b = [10 * r for r in (1, 1, 1, 2, 2, 2, 7, 7, 7)]

std = run_simulation(spec, CacheConfig(300, b, Mode.STANDARD), 0.2)
rre = run_simulation(spec, CacheConfig(300, b, Mode.RRE, [1.1 * x for x in b]), 0.2)

for name, rep in (("standard", std), ("rre", rre)):
    hist = rep.set_histogram / rep.sets
    print(name, np.round(hist[:8], 4))
    print("  more than one eviction:", round(rep.multi_eviction_fraction, 4))
    print("  ripple evictions per set:", round(rep.mean_ripple_per_set, 5))

# the slack absorbs nearly all ripple, yet the primary evictions
# of an inflated list come due on its next miss
print(np.round(std.proxy_hit_ratio() - rre.proxy_hit_ratio(), 4))
