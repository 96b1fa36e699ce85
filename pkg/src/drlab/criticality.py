"""Critical parameter: closed form for integer Y0, certificates, bisection.

Two one-sided certificates decide the phase of a single model:

* supercritical -- some certified lower bound on E(X_n) exceeds 1/(m-1);
* subcritical   -- for some s > m the quantity a_n = E(s**X_n) - 1 enters the
  region where h(1 + a) - 1 < s * a, after which a_n can only decrease and
  E(X_n) <= log(1 + a_n) / log(s) stays bounded.

Anything else is reported as undecided.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable

from .engine import iterate, step_budget
from .lattice import (
    LatticeError,
    LatticePmf,
    ModelSpec,
    OffspringLaw,
    dr_step,
    gf_excess,
    make_initial,
    truncate,
)

SUPERCRITICAL = "supercritical"
SUBCRITICAL = "subcritical"
UNDECIDED = "undecided"

# relative slack absorbing float round-off in certified comparisons
ROUNDOFF = 1e-9

# truncation budget for certificate runs; only the mass bookkeeping depends on it
CERT_BUDGET = 1e-200


@dataclass
class Certificate:
    verdict: str
    p: float
    threshold: float
    witness_n: int | None = None
    mean_low: float | None = None
    s: float | None = None
    a_n: float | None = None
    contraction_margin: float | None = None
    checked_range: tuple[int, int] | None = None
    model_id: str | None = None

    @property
    def decided(self) -> bool:
        return self.verdict != UNDECIDED

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["checked_range"] is not None:
            d["checked_range"] = list(d["checked_range"])
        return d


def _model_id(spec: ModelSpec) -> str:
    nu = ",".join(f"{k}:{float(v):g}" for k, v in spec.nu.probs.items())
    return f"nu={{{nu}}};y0_support={spec.y0.offset}..{spec.y0.max_index};step={spec.y0.step}"


# ---------------------------------------------------------------- closed form

def pc_theorem_a(y0: LatticePmf, m) -> Fraction | float:
    """Critical p for integer-valued Y0 and deterministic offspring number m.

    p_c = 1 / (max(E[((m-1) Y0 - 1) m**Y0], 0) + 1); exact when ``y0`` is in
    rational mode and ``m`` is an integer.
    """
    if isinstance(m, OffspringLaw):
        if not m.is_deterministic:
            raise LatticeError("closed form only known for deterministic offspring number")
        m = m.max_count
    if y0.step != 1:
        raise LatticeError("closed form requires an integer-valued Y0 (lattice step 1)")
    if y0.mass_at(0) != 0:
        raise LatticeError("Y0 must be supported on {1, 2, ...}")
    exact = y0.exact and float(m).is_integer()
    if exact:
        m = int(m)
        total = sum(((m - 1) * k - 1) * Fraction(m) ** k * v for k, v in y0.masses.items())
        return 1 / (max(total, Fraction(0)) + 1)
    m = float(m)
    total = math.fsum(((m - 1) * k - 1) * m**k * float(v) for k, v in y0.masses.items())
    return 1.0 / (max(total, 0.0) + 1.0)


# ------------------------------------------------------------- certificates

def certify_supercritical(spec: ModelSpec, n_max: int = 2000,
                          budget: float = CERT_BUDGET) -> Certificate:
    m = spec.m
    threshold = 1.0 / (m - 1)
    target = threshold * (1 + ROUNDOFF)
    # the dichotomy is stated over n >= 1
    trace = iterate(spec, max(n_max, 1), budget, max_dropped=0.5,
                    stop_when=lambda g: g.n >= 1 and g.mean_low > target)
    for g in trace.generations[1:]:
        if g.mean_low > target:
            return Certificate(SUPERCRITICAL, float(spec.p), threshold, witness_n=g.n,
                               mean_low=g.mean_low, checked_range=(0, g.n),
                               model_id=_model_id(spec))
    return Certificate(UNDECIDED, float(spec.p), threshold,
                       checked_range=(0, trace.n_max), model_id=_model_id(spec))


def positive_mass(pmf: LatticePmf) -> float:
    """Kept mass strictly above 0: a lower bound on P(X > 0)."""
    if pmf.offset > 0:
        return float(pmf.total_mass)
    return float(sum(pmf.weights[1:])) if pmf.exact else float(pmf.weights[1:].sum())


def h_minus_one(nu: OffspringLaw, a: float) -> float:
    """h(1 + a) - 1 without cancellation for small a >= -1."""
    if a == 0:
        return 0.0
    return math.fsum(float(v) * math.expm1(k * math.log1p(a)) for k, v in nu.probs.items())


def next_a_upper(nu: OffspringLaw, a: float, s: float, q_low: float) -> float:
    """Upper bound on a_{n+1} = G_{n+1}(s) - 1.

    Uses G_{n+1}(s) = h(G_n(s))/s + (1 - 1/s) h(G_n(0)) together with
    G_n(0) <= 1 - q_low.
    """
    zero_part = h_minus_one(nu, -q_low) if q_low > 0 else 0.0
    return (h_minus_one(nu, a) + (s - 1) * zero_part) / s


def contraction_holds(nu: OffspringLaw, a: float, s: float) -> tuple[bool, float]:
    """Whether h(1 + a') - 1 < s a' on all of (0, a], checked in exact arithmetic.

    For finite-support offspring laws (h(1+a)-1)/a is increasing, so checking
    the endpoint suffices; equivalently m (1 + c a) < s with the tightest
    admissible c = (h(1+a) - 1 - m a) / (m a**2).
    """
    if a <= 0:
        return True, s - nu.mean
    af = Fraction(a * (1 + ROUNDOFF))
    sf = Fraction(s)
    lhs = sum(Fraction(v) * ((1 + af) ** k - 1) for k, v in nu.probs.items())
    margin = sf - lhs / af
    return margin > 0, float(margin)


def subcritical_s_grid(m: float, levels: int = 14) -> list[float]:
    return [m * (1 + 2.0 ** (-j)) for j in range(1, levels + 1)]


def certify_subcritical(spec: ModelSpec, s: float | None = None, n_max: int = 2000,
                        budget: float = CERT_BUDGET, a_cap: float = 1e6) -> Certificate:
    """Look for a generation where a_n(s) sits in the contracting region.

    With ``s=None`` a geometric grid s = m (1 + 2**-j) is scanned on a single
    pmf run and the first certified value is returned.
    """
    m = spec.m
    threshold = 1.0 / (m - 1)
    if s is not None and s <= m:
        raise LatticeError(f"s must exceed m = {m}, got {s}")
    grid = [float(s)] if s is not None else subcritical_s_grid(m)

    pmf = make_initial(spec).to_float()
    if spec.p == 0:
        return Certificate(SUBCRITICAL, 0.0, threshold, witness_n=0, s=grid[0], a_n=0.0,
                           contraction_margin=grid[0] - m, checked_range=(0, 0),
                           model_id=_model_id(spec))
    a = {sv: gf_excess(pmf, sv) for sv in grid}
    alive = [sv for sv in grid if math.isfinite(a[sv])]
    for n in range(0, n_max + 1):
        for sv in alive:
            ok, margin = contraction_holds(spec.nu, a[sv], sv)
            if ok:
                return Certificate(SUBCRITICAL, float(spec.p), threshold, witness_n=n, s=sv,
                                   a_n=a[sv], contraction_margin=margin,
                                   checked_range=(0, n), model_id=_model_id(spec))
        if n == n_max:
            break
        q_low = positive_mass(pmf)
        pmf = truncate(dr_step(pmf, spec.nu), step_budget(budget, n + 1))
        for sv in alive:
            a[sv] = next_a_upper(spec.nu, a[sv], sv, q_low)
        alive = [sv for sv in alive if a[sv] < a_cap]
        if not alive:
            break
    return Certificate(UNDECIDED, float(spec.p), threshold, checked_range=(0, n),
                       model_id=_model_id(spec))


# ---------------------------------------------------------------- bisection

class BracketError(RuntimeError):
    """The initial endpoints do not carry the required certificates."""


@dataclass
class Bracket:
    low: float
    high: float
    low_certificate: Certificate
    high_certificate: Certificate
    complete: bool
    evaluations: int
    history: list[tuple[float, str]] = field(default_factory=list)

    @property
    def width(self) -> float:
        return self.high - self.low

    def contains(self, x: float) -> bool:
        return self.low <= x <= self.high

    def to_dict(self) -> dict:
        return {
            "p_low": self.low,
            "p_high": self.high,
            "width": self.width,
            "complete": self.complete,
            "evaluations": self.evaluations,
            "low_certificate": self.low_certificate.to_dict(),
            "high_certificate": self.high_certificate.to_dict(),
        }


def classify(spec: ModelSpec, n_max: int) -> Certificate:
    cert = certify_supercritical(spec, n_max)
    if cert.decided:
        return cert
    return certify_subcritical(spec, None, n_max)


def pc_bisect(family: Callable[[float], ModelSpec], p_lo: float, p_hi: float,
              tol: float = 1e-3, n_max: int = 2000, n_max_cap: int = 16000) -> Bracket:
    """Shrink a certified bracket around p_c until its width is at most ``tol``.

    When the midpoint is undecided (it may sit on p_c itself) the two
    quartile points are tried instead; the certificate budget is doubled up
    to ``n_max_cap`` before giving up with ``complete=False``.
    """
    if not 0 <= p_lo < p_hi <= 1:
        raise ValueError("need 0 <= p_lo < p_hi <= 1")
    lo_cert = certify_subcritical(family(p_lo), None, n_max)
    hi_cert = certify_supercritical(family(p_hi), n_max)
    if lo_cert.verdict != SUBCRITICAL or hi_cert.verdict != SUPERCRITICAL:
        raise BracketError(
            f"bracket not established: p_lo={p_lo} is {lo_cert.verdict}, "
            f"p_hi={p_hi} is {hi_cert.verdict}")
    lo, hi = p_lo, p_hi
    evals, history = 2, [(p_lo, lo_cert.verdict), (p_hi, hi_cert.verdict)]

    def probe(p: float, budget: int) -> Certificate:
        nonlocal evals
        evals += 1
        c = classify(family(p), budget)
        history.append((p, c.verdict))
        return c

    budget = n_max
    while hi - lo > tol:
        w = hi - lo
        progressed = False
        for points in ([lo + w / 2], [lo + w / 4, hi - w / 4]):
            for p in points:
                c = probe(p, budget)
                if c.verdict == SUPERCRITICAL and p < hi:
                    hi, hi_cert, progressed = p, c, True
                elif c.verdict == SUBCRITICAL and p > lo:
                    lo, lo_cert, progressed = p, c, True
            if progressed:
                break
        if not progressed:
            if budget >= n_max_cap:
                return Bracket(lo, hi, lo_cert, hi_cert, False, evals, history)
            budget *= 2
    return Bracket(lo, hi, lo_cert, hi_cert, True, evals, history)


# ----------------------------------------------------------------- positivity

def positivity_check(family: dict | LatticePmf, m: float | OffspringLaw) -> bool:
    """Whether p_c > 0 for a Y0 tail family and offspring law.

    ``family`` is a finite-support :class:`LatticePmf` or a dict with
    ``kind`` in {"finite", "exponential", "critical"} and ``theta`` / ``alpha``.
    Deterministic offspring numbers use the exact criterion
    E(Y0 m**Y0) < infinity; random ones only the tail results that are proved
    for them.
    """
    deterministic = True
    if isinstance(m, OffspringLaw):
        deterministic = m.is_deterministic
        m = m.mean
    log_m = math.log(m)
    if isinstance(family, LatticePmf):
        return True
    kind = family.get("kind")
    if kind == "finite":
        return True
    if kind == "exponential":
        theta = float(family["theta"])
        if theta <= 0:
            raise LatticeError("theta must be positive")
        # theta == log m is the alpha = 0 member of the critical family
        return theta > log_m
    if kind == "critical":
        alpha = float(family["alpha"])
        # P(Y0 = k) ~ k**alpha m**-k, so E(Y0 m**Y0) ~ sum k**(alpha + 1)
        if alpha > -2:
            return False
        if deterministic:
            return alpha < -2
        raise LatticeError("positivity of p_c is not settled for random offspring "
                           "numbers with alpha <= -2")
    raise LatticeError(f"unknown tail family {kind!r}")
