"""Generating-function side: G_n(s) = E(s**X_n), contraction checks, upper bounds.

One step of the recursion acts on generating functions as

    G_{n+1}(s) = h(G_n(s)) / s + (1 - 1/s) h(G_n(0)),    h(x) = E(x**nu),

so the scalar pair (G_n(s), G_n'(s)) can be followed alongside the lattice
laws, provided P(X_n = 0) is known.  Upper bounds on F come from Jensen,
E(X_n) <= log(1 + a_n) / log(s) with a_n = G_n(s) - 1, and F <= E(X_n) / m**n.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

from .criticality import next_a_upper, positive_mass
from .engine import step_budget
from .lattice import (
    LatticeError,
    ModelSpec,
    OffspringLaw,
    dr_step,
    gf_deriv,
    gf_eval,
    gf_excess,
    make_initial,
    truncate,
)

CROSS_CHECK_TOL = 1e-9
GF_BOUND_BUDGET = 1e-280


@dataclass(frozen=True)
class GfTracePoint:
    n: int
    s: float
    G: float
    G_prime: float
    a: float
    zero: float
    G_scalar: float
    G_prime_scalar: float


@dataclass
class GfTrace:
    s: float
    m: float
    nu: OffspringLaw
    points: list[GfTracePoint] = field(default_factory=list)
    truncated: bool = False
    consistent: bool = True

    def __getitem__(self, n: int) -> GfTracePoint:
        return self.points[n]


def _close(x: float, y: float, tol: float = CROSS_CHECK_TOL) -> bool:
    if math.isinf(x) or math.isinf(y):
        return x == y
    return abs(x - y) <= tol * max(1.0, abs(x), abs(y))


def gf_trace(spec: ModelSpec, s: float, n_max: int, budget: float | None = None) -> GfTrace:
    """Follow G_n(s) and G_n'(s) both from the laws and from the scalar recursion."""
    if s <= 1:
        raise LatticeError("s must exceed 1")
    nu = spec.nu
    pmf = make_initial(spec).to_float()
    trace = GfTrace(s, spec.m, nu)
    g_sc = gf_eval(pmf, s)
    gp_sc = gf_deriv(pmf, s)
    for n in range(n_max + 1):
        if n > 0:
            z = float(pmf.mass_at(0))
            try:
                hg, hz = nu.h(g_sc), nu.h(z)
                gp_sc = nu.h_prime(g_sc) * gp_sc / s - (hg - hz) / s**2
                g_sc = hg / s + (s - 1) / s * hz
            except OverflowError:
                g_sc = gp_sc = math.inf
            pmf = dr_step(pmf, nu)
            if budget is not None:
                pmf = truncate(pmf, step_budget(budget, n))
        G = gf_eval(pmf, s)
        point = GfTracePoint(n, s, G, gf_deriv(pmf, s), gf_excess(pmf, s) - pmf.dropped,
                             float(pmf.mass_at(0)), g_sc, gp_sc)
        trace.points.append(point)
        if pmf.dropped > 0:
            trace.truncated = True
        elif not (_close(point.G, g_sc) and _close(point.G_prime, gp_sc)):
            trace.consistent = False
    return trace


def contraction_constant(nu: OffspringLaw, delta0: float) -> float:
    """Smallest c with h'(1 + a) <= m + c a on (0, delta0].

    h'(1 + a) - m has nonnegative Taylor coefficients, so the chord slope at
    delta0 dominates on the whole interval.
    """
    return (nu.h_prime(1 + delta0) - nu.mean) / delta0


@dataclass
class ContractionReport:
    s: float
    delta0: float
    c0: float
    n1: int | None
    checked_upto: int
    holds: bool
    min_margin: float | None
    violations: list[int] = field(default_factory=list)
    applicable: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def verify_contraction(trace: GfTrace, delta0: float = 1.0, rel_tol: float = 1e-12
                       ) -> ContractionReport:
    """Check G_n'(s) <= (m/s)**n G_0'(s) for 1 <= n <= N1.

    N1 is the first n with a_n >= delta0 or G_n'(s) >= 1/c0, where c0 is the
    exact contraction constant of the offspring law on (0, delta0].
    """
    s, m = trace.s, trace.m
    c0 = contraction_constant(trace.nu, delta0)
    if not 1 < s < m:
        return ContractionReport(s, delta0, c0, None, 0, True, None, applicable=False)
    n1 = None
    for pt in trace.points:
        if pt.a >= delta0 or pt.G_prime >= 1 / c0:
            n1 = pt.n
            break
    last = trace.points[-1].n if n1 is None else min(n1, trace.points[-1].n)
    g0 = trace.points[0].G_prime
    violations, margin = [], None
    for pt in trace.points[1:last + 1]:
        bound = (m / s) ** pt.n * g0
        if pt.G_prime > bound * (1 + rel_tol) + 1e-300:
            violations.append(pt.n)
        if bound > 0:
            r = (bound - pt.G_prime) / bound
            margin = r if margin is None else min(margin, r)
    return ContractionReport(s, delta0, c0, n1, last, not violations, margin, violations)


# ---------------------------------------------------------------- upper bounds

@dataclass(frozen=True)
class GfBound:
    p: float
    s: float
    N: int
    a_N: float
    F_upper: float
    established: bool
    constant: float

    def row(self) -> list:
        return [self.p, self.s, self.N, self.a_N, self.F_upper, self.established]


GF_BOUND_COLUMNS = ["p", "s", "N", "a_N", "F_upper", "established"]


def bound_at(spec: ModelSpec, s: float, N: int, delta0: float = 1.0,
             budget: float = GF_BOUND_BUDGET) -> tuple[float, float, bool]:
    """Certified upper bound on a_N(s) and the resulting bound on F.

    Returns ``(a_N, F_upper, established)``; established means the run kept
    a_n below ``delta0`` for every n <= N; a breach stops the run early.
    """
    nu, m = spec.nu, spec.m
    pmf = make_initial(spec).to_float()
    a = gf_excess(pmf, s)
    if not a < delta0:
        return a, math.inf, False
    for n in range(N):
        q = positive_mass(pmf)
        a = next_a_upper(nu, a, s, q)
        if not a < delta0:
            return a, math.inf, False
        if n + 1 < N:
            pmf = truncate(dr_step(pmf, nu), step_budget(budget, n + 1))
    f_upper = math.log1p(a) / (m**N * math.log(s))
    return a, f_upper, True


def _family_param(spec: ModelSpec, key: str, kind: str) -> float:
    fam = spec.family or {}
    if fam.get("kind") != kind or key not in fam:
        raise LatticeError(f"model needs a {kind!r} tail family with {key!r}")
    return float(fam[key])


def upper_bound_critical(spec: ModelSpec, p: float | None = None, c7: float | None = None,
                         delta0: float = 1.0) -> GfBound:
    """Upper bound on F at s = m exp(-1/N), N = floor((c7 p)**(-1/(2+alpha))).

    Without ``c7`` the smallest value 2**j (j >= -12) that keeps a_n below
    ``delta0`` is used, which gives the largest N and the tightest bound.
    """
    alpha = _family_param(spec, "alpha", "critical")
    p = float(spec.p if p is None else p)
    spec = spec.with_p(p)
    m = spec.m
    if p == 0:
        return GfBound(0.0, m, 0, 0.0, 0.0, True, c7 or 0.0)
    candidates = [c7] if c7 is not None else [2.0**j for j in range(-12, 40)]
    last = None
    for c in candidates:
        N = math.floor((c * p) ** (-1.0 / (2.0 + alpha)))
        if N < 1:
            break
        s = m * math.exp(-1.0 / N)
        if s <= 1:
            continue
        a, f_up, ok = bound_at(spec, s, N, delta0)
        last = GfBound(p, s, N, a, f_up, ok, c)
        if ok:
            return last
    if last is None:
        return GfBound(p, math.nan, 0, math.nan, math.inf, False, candidates[0])
    return last


def upper_bound_power_law(spec: ModelSpec, p: float | None = None, c9: float | None = None,
                          delta0: float = 1.0) -> GfBound:
    """Upper bound on F at s = exp(theta - eps), eps = 1/log(1/p), run to N'.

    Without ``c9`` the largest value 2**j (j <= 30) that keeps a_n below
    ``delta0`` is used.
    """
    theta = _family_param(spec, "theta", "exponential")
    p = float(spec.p if p is None else p)
    spec = spec.with_p(p)
    m = spec.m
    if not theta < math.log(m):
        raise LatticeError("power-law bound needs theta < log m")
    if p == 0:
        return GfBound(0.0, 1.0, 0, 0.0, 0.0, True, c9 or 0.0)
    eps = 1.0 / math.log(1.0 / p)
    if theta - eps <= 0:
        return GfBound(p, math.nan, 0, math.nan, math.inf, False, c9 or 0.0)
    s = math.exp(theta - eps)
    candidates = [c9] if c9 is not None else [2.0**j for j in range(30, -41, -1)]
    last = None
    for c in candidates:
        ratio = c * eps**2 / p
        if ratio <= 1:
            break
        N = math.floor(math.log(ratio) / math.log(m / s))
        if N < 1:
            continue
        a, f_up, ok = bound_at(spec, s, N, delta0)
        last = GfBound(p, s, N, a, f_up, ok, c)
        if ok:
            return last
    if last is None:
        return GfBound(p, s, 0, math.nan, math.inf, False, candidates[0])
    return last


def bounds_to_csv(bounds: list[GfBound]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GF_BOUND_COLUMNS)
    for b in bounds:
        w.writerow([repr(x) if isinstance(x, float) else x for x in b.row()])
    return buf.getvalue()


def beta_exponent(theta: float, m: float) -> float:
    return math.log(m) / (math.log(m) - theta)


def chi_exponent(alpha: float) -> float:
    return 1.0 / (alpha + 2.0)
