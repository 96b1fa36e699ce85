"""Depth-n iteration of the recursion and the two-sided free-energy bound.

For every generation the trace records a certified interval for E(X_n).  The
free energy ``F = lim E(X_n) / m**n`` is then squeezed between

    (E(X_n) - 1/(m-1)) / m**n   and   E(X_n) / m**n,

the lower end being nondecreasing in n and the upper end nonincreasing.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

from .lattice import (
    LatticePmf,
    ModelSpec,
    dr_step,
    make_initial,
    mean,
    truncate,
)

# dense support length beyond which iteration stops
DEFAULT_MAX_SUPPORT = 4_000_000

TRACE_COLUMNS = ["n", "mean_low", "mean_high", "zero_mass", "support_size",
                 "dropped", "F_low", "F_high"]


@dataclass(frozen=True)
class Generation:
    n: int
    mean_low: float
    mean_high: float
    zero_mass: float
    support_size: int
    dropped: float
    dropped_mean_bound: float


@dataclass
class IterationTrace:
    m: float
    generations: list[Generation] = field(default_factory=list)
    pmfs: list[LatticePmf] = field(default_factory=list)
    last: LatticePmf | None = None
    stopped: str = "n_max"

    @property
    def n_max(self) -> int:
        return self.generations[-1].n

    def __getitem__(self, n: int) -> Generation:
        return self.generations[n]

    def sandwich_raw(self, n: int) -> tuple[float, float]:
        g = self.generations[n]
        scale = self.m ** n
        return (g.mean_low - 1 / (self.m - 1)) / scale, g.mean_high / scale

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for g in self.generations:
            lo, hi = self.sandwich_raw(g.n)
            writer.writerow([g.n, repr(g.mean_low), repr(g.mean_high), repr(g.zero_mass),
                             g.support_size, repr(g.dropped), repr(lo), repr(hi)])
        return buf.getvalue()


def _record(n: int, pmf: LatticePmf) -> Generation:
    lo = float(mean(pmf))
    return Generation(n, lo, lo + float(pmf.dropped_mean_bound), float(pmf.mass_at(0)),
                      pmf.support_size, float(pmf.dropped), float(pmf.dropped_mean_bound))


def step_budget(budget: float, n: int) -> float:
    """Truncation budget for generation n; the schedule sums to ``budget``.

    Floored at 1e-300 so that long runs keep a positive budget.
    """
    return max(budget * 2.0 ** (-n), 1e-300)


def iterate(spec: ModelSpec, n_max: int, budget_per_step: float | None = 1e-30, *,
            keep_pmfs: bool = False, max_support: int = DEFAULT_MAX_SUPPORT,
            max_dropped: float = 1e-3, stop_when=None) -> IterationTrace:
    """Iterate the recursion from X0 up to generation ``n_max``.

    ``budget_per_step`` is the total truncation budget spread geometrically
    over generations; ``None`` disables truncation (exact iterates).
    ``stop_when(generation)`` may end the run early.
    """
    if n_max < 0:
        raise ValueError("n_max must be >= 0")
    pmf = make_initial(spec)
    trace = IterationTrace(spec.m)
    trace.generations.append(_record(0, pmf))
    if keep_pmfs:
        trace.pmfs.append(pmf)
    for n in range(1, n_max + 1):
        if stop_when is not None and stop_when(trace.generations[-1]):
            trace.stopped = "condition"
            break
        if len(pmf.weights) * spec.nu.max_count > max_support:
            trace.stopped = "support_cap"
            break
        if pmf.dropped > max_dropped:
            trace.stopped = "dropped_cap"
            break
        pmf = dr_step(pmf, spec.nu)
        if budget_per_step is not None:
            pmf = truncate(pmf, step_budget(budget_per_step, n))
        trace.generations.append(_record(n, pmf))
        if keep_pmfs:
            trace.pmfs.append(pmf)
    trace.last = pmf
    return trace


def free_energy_sandwich(trace: IterationTrace, n: int) -> tuple[float, float]:
    """Raw lower and upper free-energy bounds at generation ``n``.

    The lower value may be negative; it is only clamped when reported as an
    interval for F.
    """
    if n > trace.n_max:
        raise IndexError(f"generation {n} not in trace (n_max={trace.n_max})")
    return trace.sandwich_raw(n)


def sandwich_is_monotone(trace: IterationTrace, slack: float = 1e-12) -> bool:
    """Lower ends nondecreasing, upper ends nonincreasing, up to truncation width."""
    prev_lo, prev_hi = -math.inf, math.inf
    for g in trace.generations:
        lo, hi = trace.sandwich_raw(g.n)
        width = g.dropped_mean_bound / trace.m ** g.n
        tol = slack * max(1.0, abs(hi)) + width
        if lo < prev_lo - tol or hi > prev_hi + tol:
            return False
        prev_lo, prev_hi = max(prev_lo, lo), min(prev_hi, hi)
    return True


@dataclass(frozen=True)
class FreeEnergy:
    low: float
    high: float
    n_used: int
    reached: bool
    stop_reason: str

    @property
    def width(self) -> float:
        return self.high - self.low

    @property
    def mid(self) -> float:
        return 0.5 * (self.low + self.high)

    def to_dict(self) -> dict:
        return {"F_low": self.low, "F_high": self.high, "n_used": self.n_used,
                "tolerance_reached": self.reached, "stop_reason": self.stop_reason}


def best_interval(trace: IterationTrace) -> tuple[float, float, int]:
    """Intersection of all generation sandwiches, clamped at 0."""
    lo, hi, n_best = 0.0, math.inf, 0
    for g in trace.generations:
        l, h = trace.sandwich_raw(g.n)
        if l > lo:
            lo = l
        if h < hi:
            hi, n_best = h, g.n
    return lo, max(hi, lo), n_best


def default_budget(m: float, n_cap: int) -> float:
    """Budget small enough that dropped mass, which grows like m**n, stays tiny."""
    return max(1e-6 * m ** (-n_cap), 1e-290)


def free_energy(spec: ModelSpec, tol: float, n_cap: int = 200, *, relative: bool = False,
                budget: float | None = None,
                max_support: int = DEFAULT_MAX_SUPPORT) -> FreeEnergy:
    """Certified interval for F, iterating until its width drops below ``tol``.

    With ``relative=True`` the target is ``width <= tol * low``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if spec.p == 0:
        return FreeEnergy(0.0, 0.0, 0, True, "exact")
    m = spec.m
    if budget is None:
        budget = default_budget(m, n_cap)

    def done(g: Generation) -> bool:
        scale = m ** g.n
        lo = (g.mean_low - 1 / (m - 1)) / scale
        hi = g.mean_high / scale
        return hi - lo <= (tol * lo if relative else tol)

    trace = iterate(spec, n_cap, budget, max_support=max_support, stop_when=done)
    lo, hi, _ = best_interval(trace)
    n_used = trace.n_max
    reached = (hi - lo) <= (tol * lo if relative else tol)
    reason = "tolerance" if reached else trace.stopped
    return FreeEnergy(lo, hi, n_used, reached, reason)
