"""Shared-object LRU caching: engine, hit-probability approximation,
admission control, workload simulation and a small TCP service."""

__version__ = "0.1.0"

from .admission import (AdmissionDecision, Basis, OverbookingInfeasible, SlaSpec,
                        VirtualAllocation, admit_recomputed, can_admit,
                        minimal_virtual_allocation, overbooking_report)
from .approx import (Feasibility, InfeasibleAllocation, NotConverged, Rule, SolveResult,
                     attribution, expected_inverse_share, feasibility, hit_probability,
                     poisson_binomial_pmf, residuals, solve, solve_unshared)
from .core import (CacheError, CapacityExhausted, EvictionTrace, Mode, ObjectTooLarge,
                   Outcome, RequestOutcome, SharedCache, new_cache)
from .workload import (CacheConfig, SimReport, WorkloadSpec, estimate_rates, generate_trace,
                       run_coupled_dominance, run_simulation, run_unshared_simulation,
                       zipf_weights)

__all__ = [
    "AdmissionDecision", "Basis", "CacheConfig", "CacheError", "CapacityExhausted",
    "EvictionTrace", "Feasibility", "InfeasibleAllocation", "Mode", "NotConverged",
    "ObjectTooLarge", "Outcome", "OverbookingInfeasible", "RequestOutcome", "Rule",
    "SharedCache", "SimReport", "SlaSpec", "SolveResult", "VirtualAllocation",
    "WorkloadSpec", "admit_recomputed", "attribution", "can_admit", "estimate_rates",
    "expected_inverse_share", "feasibility", "generate_trace", "hit_probability",
    "minimal_virtual_allocation", "new_cache", "overbooking_report",
    "poisson_binomial_pmf", "residuals", "run_coupled_dominance", "run_simulation",
    "run_unshared_simulation", "solve", "solve_unshared", "zipf_weights",
]
