"""Overbooking admission control.

A proxy buys the hit probabilities it would see alone in a private LRU of
size ``b*`` (its SLA).  Sharing lets a smaller virtual allocation ``b``
deliver the same hit probabilities, and the memory saved can be sold to new
proxies even when the SLA sizes add up to more than the physical cache.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .approx import Rule, solve, solve_unshared


class Basis(enum.Enum):
    CONSERVATIVE_SLACK = "conservative_slack"
    RECOMPUTED_VIRTUAL = "recomputed_virtual"


class OverbookingInfeasible(ValueError):
    def __init__(self, message: str, allocation: "VirtualAllocation | None" = None):
        super().__init__(message)
        self.allocation = allocation


@dataclass(frozen=True)
class SlaSpec:
    b_star: tuple
    capacity: float

    def __init__(self, b_star: Sequence[float], capacity: float):
        if any(b <= 0 for b in b_star) or capacity <= 0:
            raise ValueError("SLA allocations and capacity must be positive")
        object.__setattr__(self, "b_star", tuple(float(b) for b in b_star))
        object.__setattr__(self, "capacity", float(capacity))


@dataclass
class VirtualAllocation:
    b: np.ndarray
    capacity: float
    sweeps: int = 0

    @property
    def slack(self) -> float:
        return self.capacity - float(np.sum(self.b))


@dataclass
class AdmissionDecision:
    admitted: bool
    basis: Basis
    b: np.ndarray | None = None
    slack: float = 0.0


@dataclass
class OverbookingReport:
    total_sla: float
    total_virtual: float
    capacity: float
    overbooked: bool
    slack: float


def can_admit(sla_new: float, capacity: float, current_b: Sequence[float]) -> AdmissionDecision:
    """Conservative test: the newcomer's whole SLA must fit in today's slack."""
    slack = capacity - float(np.sum(current_b))
    return AdmissionDecision(sla_new <= slack, Basis.CONSERVATIVE_SLACK, None, slack)


def overbooking_report(sla: SlaSpec, virtual: VirtualAllocation) -> OverbookingReport:
    total_sla = float(sum(sla.b_star))
    total_virtual = float(np.sum(virtual.b))
    return OverbookingReport(total_sla, total_virtual, sla.capacity,
                             total_sla > sla.capacity, sla.capacity - total_virtual)


def _meets_targets(b, lengths, rates, rule, targets, tol) -> bool:
    h = solve(b, lengths, rates, rule).h
    return bool(np.all(h >= targets - tol))


def minimal_virtual_allocation(sla: SlaSpec, rates, lengths, rule: Rule | str = Rule.EXACT,
                               tolerance: float = 1e-4, granularity: float = 1.0,
                               max_sweeps: int = 50) -> VirtualAllocation:
    """Smallest virtual allocations that keep every SLA hit probability.

    Targets ``h*`` come from the unshared approximation at ``b*``.  Starting
    from ``b = b*`` (which meets them, since sharing only ever shrinks the
    charge) each proxy in turn is lowered by binary search on the grid
    ``granularity * n`` to the least value at which every proxy still meets
    its targets; sweeps repeat until none moves.  Lowering one proxy can only
    hurt the others, so every accepted point stays feasible and the
    sequence is monotone.

    Raises :class:`OverbookingInfeasible` when the result exceeds the
    physical capacity.
    """
    rule = Rule(rule)
    rates = np.atleast_2d(np.asarray(rates, dtype=float))
    lengths = np.asarray(lengths, dtype=float)
    b_star = np.array(sla.b_star)
    if rates.shape[0] != b_star.size:
        raise ValueError("one rate row per SLA entry is required")
    targets = solve_unshared(b_star, lengths, rates).h
    b = b_star.copy()
    if not _meets_targets(b, lengths, rates, rule, targets, tolerance):
        raise OverbookingInfeasible("SLA allocations do not meet their own targets under sharing")

    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        moved = False
        for i in range(b.size):
            # grid points strictly below the current value: granularity * n
            hi_n = int(np.ceil(b[i] / granularity)) - 1
            lo_n = 1
            if hi_n < lo_n:
                continue

            def ok(n):
                trial = b.copy()
                trial[i] = n * granularity
                return _meets_targets(trial, lengths, rates, rule, targets, tolerance)

            if not ok(hi_n):
                continue
            # invariant: ok(hi_n); find the least such n
            while lo_n < hi_n:
                mid = (lo_n + hi_n) // 2
                if ok(mid):
                    hi_n = mid
                else:
                    lo_n = mid + 1
            b[i] = hi_n * granularity
            moved = True
        if not moved:
            break

    result = VirtualAllocation(b, sla.capacity, sweeps)
    if result.slack < 0:
        raise OverbookingInfeasible(
            f"virtual allocations total {np.sum(b):g} exceed capacity {sla.capacity:g}", result)
    return result


def admit_recomputed(sla: SlaSpec, sla_new: float, rates, lengths,
                     rule: Rule | str = Rule.EXACT, tolerance: float = 1e-4,
                     granularity: float = 1.0) -> AdmissionDecision:
    """Admit by recomputing every virtual allocation with the newcomer included.

    ``rates`` has one row per existing proxy followed by the newcomer's row,
    as estimated once its demand is known.
    """
    extended = SlaSpec(list(sla.b_star) + [sla_new], sla.capacity)
    try:
        alloc = minimal_virtual_allocation(extended, rates, lengths, rule, tolerance, granularity)
    except OverbookingInfeasible as exc:
        b = None if exc.allocation is None else exc.allocation.b
        slack = float("nan") if exc.allocation is None else exc.allocation.slack
        return AdmissionDecision(False, Basis.RECOMPUTED_VIRTUAL, b, slack)
    return AdmissionDecision(True, Basis.RECOMPUTED_VIRTUAL, alloc.b, alloc.slack)
