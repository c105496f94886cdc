# Overbooking: proxies that share content can be given less memory than
# their isolated budgets b* and still see the same hit probabilities.
import numpy as np

from sharedcache import (SlaSpec, WorkloadSpec, admit_recomputed, can_admit,
                         minimal_virtual_allocation, overbooking_report)

spec = WorkloadSpec(1000, 3, [0.8, 0.8, 0.8])
R, ell = spec.rate_matrix(), spec.object_lengths()

sla = SlaSpec([50, 50], 150)
alloc = minimal_virtual_allocation(sla, R[:2], ell)
print("virtual allocation", alloc.b, "slack", alloc.slack)
print(overbooking_report(sla, alloc))

# a third proxy asks for 60: compare the two admission rules
print(can_admit(60, 150, alloc.b))
d = admit_recomputed(sla, 60, R, ell)
print(d.admitted, d.b, d.slack)
