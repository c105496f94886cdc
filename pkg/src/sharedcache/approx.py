"""Working-set approximation of per-proxy hit probabilities with sharing.

Under the independent reference model proxy ``i`` requests object ``k`` at
rate ``lambda[i, k]``.  Each list is summarized by a mean eviction time
``t_i``; object ``k`` is in list ``i`` with probability
``h[i, k] = 1 - exp(-lambda[i, k] * t_i)`` and is charged some mean
attribution ``L[i, k] <= length[k]``.  The eviction times solve the
capacity equations ``b_i = sum_k h[i, k] * L[i, k]``, one per proxy.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class Rule(enum.Enum):
    """How an object's length is attributed to one of its holders."""

    EXACT = "exact"      # l * E[1 / (1 + sum_{j != i} Z_j)], independent Bernoulli Z_j
    JENSEN = "jensen"    # l / (1 + sum_{j != i} h_j)
    RATIO = "ratio"      # l * h_i / (h_i + sum_{j != i} h_j)
    FULL = "full"        # l, i.e. no sharing


class InfeasibleAllocation(ValueError):
    def __init__(self, message: str, margins=None):
        super().__init__(message)
        self.margins = margins


class NotConverged(RuntimeError):
    pass


class Feasibility(NamedTuple):
    feasible: bool
    margins: np.ndarray   # (1/J) * sum(lengths) - b_i; positive means feasible


@dataclass
class SolveResult:
    t: np.ndarray            # mean eviction time per proxy
    h: np.ndarray            # predicted hit probability, J x N
    residuals: np.ndarray
    iterations: int
    rule: Rule

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residuals))) if self.residuals.size else 0.0


def hit_probability(lam, t):
    """``1 - exp(-lam * t)``, computed without cancellation."""
    return -np.expm1(-np.multiply(lam, t))


def poisson_binomial_pmf(probs: Sequence[float]) -> np.ndarray:
    """Distribution of a sum of independent Bernoulli variables."""
    pmf = np.zeros(len(probs) + 1)
    pmf[0] = 1.0
    for n, p in enumerate(probs, start=1):
        pmf[1:n + 1] = pmf[1:n + 1] * (1.0 - p) + pmf[0:n] * p
        pmf[0] *= 1.0 - p
    return pmf


def expected_inverse_share(h_others: Sequence[float]) -> float:
    """``E[1 / (1 + S)]`` where ``S`` sums independent Bernoulli(h) draws."""
    pmf = poisson_binomial_pmf(h_others)
    return float(pmf @ (1.0 / np.arange(1, pmf.size + 1)))


def _inverse_share_columns(h_others: np.ndarray) -> np.ndarray:
    """Column-wise ``expected_inverse_share`` for an ``m x N`` array."""
    m = h_others.shape[0]
    pmf = np.zeros((m + 1, h_others.shape[1]))
    pmf[0] = 1.0
    for n in range(1, m + 1):
        p = h_others[n - 1]
        pmf[1:n + 1] = pmf[1:n + 1] * (1.0 - p) + pmf[0:n] * p
        pmf[0] *= 1.0 - p
    return (1.0 / np.arange(1, m + 2)) @ pmf


def attribution(rule: Rule | str, ell: float, h_self: float, h_others: Sequence[float]) -> float:
    """Mean length charged to a holder of an object under ``rule``."""
    rule = Rule(rule)
    h_others = np.asarray(h_others, dtype=float)
    if rule is Rule.FULL:
        return float(ell)
    if rule is Rule.EXACT:
        return float(ell) * expected_inverse_share(h_others)
    total = float(h_others.sum())
    if rule is Rule.JENSEN:
        return float(ell) / (1.0 + total)
    if h_self + total == 0.0:
        return 0.0
    return float(ell) * h_self / (h_self + total)


def feasibility(b: Sequence[float], lengths: Sequence[float], num_proxies: int) -> Feasibility:
    """Check that no list could hold every object even if all were fully shared."""
    b = np.asarray(b, dtype=float)
    margins = float(np.sum(lengths)) / num_proxies - b
    return Feasibility(bool(np.all(margins > 0)), margins)


# -- capacity equations --------------------------------------------------

def _prepare(b, lengths, rates):
    b = np.atleast_1d(np.asarray(b, dtype=float))
    rates = np.atleast_2d(np.asarray(rates, dtype=float))
    lengths = np.asarray(lengths, dtype=float)
    if rates.shape[0] != b.size:
        raise ValueError(f"rates have {rates.shape[0]} rows for {b.size} proxies")
    if lengths.shape != (rates.shape[1],):
        raise ValueError("one length per object is required")
    if np.any(rates < 0) or np.any(lengths <= 0) or np.any(b <= 0):
        raise ValueError("rates must be nonnegative, lengths and allocations positive")
    if np.any(rates.max(axis=1) <= 0):
        raise ValueError("every proxy needs at least one positive rate")
    return b, lengths, rates


def _charge_factors(rule: Rule, i: int, H: np.ndarray) -> np.ndarray:
    """Per-object factor multiplying ``length`` in proxy ``i``'s charge.

    For ``RATIO`` this is the other holders' total ``sum_{j != i} h_j``
    rather than a factor, since the charge then depends on ``h_i`` too.
    """
    others = np.delete(H, i, axis=0)
    if rule is Rule.FULL or others.shape[0] == 0:
        return np.ones(H.shape[1]) if rule is not Rule.RATIO else np.zeros(H.shape[1])
    if rule is Rule.EXACT:
        return _inverse_share_columns(others)
    if rule is Rule.JENSEN:
        return 1.0 / (1.0 + others.sum(axis=0))
    return others.sum(axis=0)


def _used(rule: Rule, h: np.ndarray, lengths: np.ndarray, factor: np.ndarray) -> float:
    """``sum_k h_k * L_k`` for one proxy."""
    if rule is Rule.RATIO:
        denom = h + factor
        with np.errstate(invalid="ignore", divide="ignore"):
            share = np.where(denom > 0, h / denom, 0.0)
        return float(np.sum(h * share * lengths))
    return float(np.sum(h * factor * lengths))


def _used_slope(rule: Rule, lam: np.ndarray, t: float, lengths: np.ndarray,
                factor: np.ndarray) -> float:
    """Derivative of ``_used`` with respect to the proxy's own eviction time."""
    dh = lam * np.exp(-lam * t)
    if rule is Rule.RATIO:
        h = hit_probability(lam, t)
        denom = h + factor
        with np.errstate(invalid="ignore", divide="ignore"):
            dg = np.where(denom > 0, (h * h + 2.0 * h * factor) / (denom * denom), 0.0)
        return float(np.sum(dh * dg * lengths))
    return float(np.sum(dh * factor * lengths))


def residual(i: int, t, b, lengths, rates, rule: Rule | str = Rule.EXACT) -> float:
    """Capacity-equation residual ``F_i(t) = b_i - sum_k h[i,k] L[i,k]``."""
    rule = Rule(rule)
    b, lengths, rates = _prepare(b, lengths, rates)
    t = np.asarray(t, dtype=float)
    H = hit_probability(rates, t[:, None])
    return b[i] - _used(rule, H[i], lengths, _charge_factors(rule, i, H))


def residuals(t, b, lengths, rates, rule: Rule | str = Rule.EXACT) -> np.ndarray:
    rule = Rule(rule)
    b, lengths, rates = _prepare(b, lengths, rates)
    t = np.asarray(t, dtype=float)
    H = hit_probability(rates, t[:, None])
    return np.array([b[i] - _used(rule, H[i], lengths, _charge_factors(rule, i, H))
                     for i in range(b.size)])


def _solve_scalar(target: float, rule: Rule, lam: np.ndarray, lengths: np.ndarray,
                  factor: np.ndarray, t_start: float, xtol: float) -> float:
    """Root of the decreasing ``target - used(t)`` by safeguarded Newton."""

    def f(t):
        return target - _used(rule, hit_probability(lam, t), lengths, factor)

    lo, hi = 0.0, max(1.0, t_start)
    f_hi = f(hi)
    while f_hi >= 0.0:
        lo, hi = hi, hi * 2.0
        if hi > 1e300:
            raise InfeasibleAllocation("list can hold its whole demand; no finite eviction time")
        f_hi = f(hi)
    t = min(max(t_start, lo), hi)
    if not lo < t < hi:
        t = 0.5 * (lo + hi)
    for _ in range(400):
        ft = f(t)
        if ft == 0.0:
            return t
        if ft > 0.0:
            lo = t
        else:
            hi = t
        slope = _used_slope(rule, lam, t, lengths, factor)
        step = ft / slope if slope > 0 else np.inf
        t_new = t + step
        if not lo < t_new < hi:
            t_new = 0.5 * (lo + hi)
        if abs(t_new - t) <= xtol * max(1.0, t) or hi - lo <= xtol * max(1.0, t):
            return t_new
        t = t_new
    return t


def _symmetrize(t: np.ndarray, b: np.ndarray, rates: np.ndarray) -> np.ndarray:
    # proxies with identical demand and allocation share one eviction time
    t = t.copy()
    done = np.zeros(t.size, dtype=bool)
    for i in range(t.size):
        if done[i]:
            continue
        group = [j for j in range(i, t.size)
                 if not done[j] and b[j] == b[i] and np.array_equal(rates[j], rates[i])]
        t[group] = np.mean(t[group])
        done[group] = True
    return t


def _solve(b, lengths, rates, rule: Rule, tol: float, max_iters: int, t0) -> SolveResult:
    active = rates.max(axis=0) > 0
    lengths_a = lengths[active]
    rates_a = rates[:, active]
    J = b.size
    t = np.zeros(J) if t0 is None else np.array(t0, dtype=float)
    if t.shape != (J,) or np.any(t < 0):
        raise ValueError("starting point must be a nonnegative vector, one entry per proxy")

    H = hit_probability(rates_a, t[:, None])
    iterations = 0
    for iterations in range(1, max_iters + 1):
        largest_step = 0.0
        for i in range(J):
            factor = _charge_factors(rule, i, H)
            new = _solve_scalar(b[i], rule, rates_a[i], lengths_a, factor, t[i], 1e-15)
            largest_step = max(largest_step, abs(new - t[i]) / max(1.0, new))
            t[i] = new
            H[i] = hit_probability(rates_a[i], new)
        if largest_step <= 1e-14:
            break
    else:
        res = residuals(t, b, lengths_a, rates_a, rule)
        if np.max(np.abs(res)) > tol:
            raise NotConverged(f"no convergence after {max_iters} sweeps "
                               f"(max residual {np.max(np.abs(res)):.3g})")

    t = _symmetrize(t, b, rates_a)
    res = residuals(t, b, lengths_a, rates_a, rule)
    if np.max(np.abs(res)) > tol:
        raise NotConverged(f"max residual {np.max(np.abs(res)):.3g} exceeds {tol:g}")
    return SolveResult(t=t, h=hit_probability(rates, t[:, None]), residuals=res,
                       iterations=iterations, rule=rule)


def solve(b, lengths, rates, rule: Rule | str = Rule.EXACT, tolerance: float = 1e-9,
          max_iters: int = 500, t0=None) -> SolveResult:
    """Solve the shared-cache capacity equations for the eviction times.

    Coordinate sweeps: each proxy's equation is strictly decreasing in its
    own eviction time, so it is solved by Newton's method safeguarded with
    bisection while the other times are held fixed.  Raises
    :class:`InfeasibleAllocation` when some ``b_i >= sum(lengths) / J``.
    """
    rule = Rule(rule)
    b, lengths, rates = _prepare(b, lengths, rates)
    active = rates.max(axis=0) > 0
    check = feasibility(b, lengths[active], b.size)
    if not check.feasible:
        raise InfeasibleAllocation(
            "allocation too large for the working-set approximation: "
            f"margins {np.round(check.margins, 6).tolist()}", check.margins)
    return _solve(b, lengths, rates, rule, tolerance, max_iters, t0)


def solve_unshared(b, lengths, rates, tolerance: float = 1e-9, max_iters: int = 500) -> SolveResult:
    """Classic working-set approximation with each list charged full lengths."""
    b, lengths, rates = _prepare(b, lengths, rates)
    for i in range(b.size):
        demand = float(lengths[rates[i] > 0].sum())
        if b[i] >= demand:
            raise InfeasibleAllocation(
                f"proxy {i}: allocation {b[i]:g} holds its whole demand {demand:g}",
                np.array([demand - b[i]]))
    return _solve(b, lengths, rates, Rule.FULL, tolerance, max_iters, None)


def check_stochastic_ordering(pmf_larger, pmf_smaller) -> bool:
    """Compare ``E[1/(1+X)]`` for two distributions on ``{0, 1, 2, ...}``.

    ``pmf_larger`` must be stochastically larger, i.e. its CDF lies
    pointwise below that of ``pmf_smaller``.  Returns whether
    ``E[1/(1+X_larger)] <= E[1/(1+X_smaller)]``.
    """
    p1 = np.asarray(pmf_larger, dtype=float)
    p2 = np.asarray(pmf_smaller, dtype=float)
    n = max(p1.size, p2.size)
    p1 = np.pad(p1, (0, n - p1.size))
    p2 = np.pad(p2, (0, n - p2.size))
    for p in (p1, p2):
        if np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-12):
            raise ValueError("inputs must be probability mass functions")
    if np.any(np.cumsum(p1) > np.cumsum(p2) + 1e-12):
        raise ValueError("first distribution is not stochastically larger (F1 <= F2 fails)")
    g = 1.0 / np.arange(1, n + 1)
    return bool(p1 @ g <= p2 @ g + 1e-15)
