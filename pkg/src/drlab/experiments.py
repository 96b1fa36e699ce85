"""Tail families for Y0, exponent fits, the near-critical scan and the leaf-maximum check."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .criticality import pc_theorem_a
from .engine import free_energy, iterate
from .gf import beta_exponent, chi_exponent, upper_bound_critical
from .lattice import LatticeError, LatticePmf, ModelSpec, OffspringLaw, tail

EXPONENTIAL = "exponential"
CRITICAL = "critical"

# fits only use points whose certified interval has relative width below this
DEFAULT_FIT_TOL = 0.05
BETA_GRID = tuple(2.0**-k for k in range(4, 11))
CHI_GRID = tuple(2.0**-k for k in range(5, 12))


@dataclass
class TailFamily:
    """Y0 on 1..k_max with P(Y0 = k) proportional to exp(-theta k) or k**alpha m**-k."""

    kind: str
    param: float
    m: float
    k_max: int
    pmf: LatticePmf
    remainder: float
    c_low: float
    c_high: float

    def to_dict(self) -> dict:
        key = "theta" if self.kind == EXPONENTIAL else "alpha"
        return {"kind": self.kind, key: self.param, "m": self.m, "k_max": self.k_max,
                "remainder": self.remainder, "c_low": self.c_low, "c_high": self.c_high}

    def spec(self, nu: OffspringLaw, p: float) -> ModelSpec:
        return ModelSpec(nu, self.pmf, p, self.to_dict())


def _profile(kind: str, param: float, m: float, k: np.ndarray) -> np.ndarray:
    if kind == EXPONENTIAL:
        return np.exp(-param * k)
    return k.astype(float) ** param * m ** (-k.astype(float))


def _validate(kind: str, param: float, m: float) -> None:
    if kind == EXPONENTIAL:
        if not param > 0:
            raise LatticeError("exponential family needs theta > 0")
    elif kind == CRITICAL:
        if not param > -2:
            raise LatticeError("critical family needs alpha > -2")
        if not m > 1:
            raise LatticeError("critical family needs m > 1")
    else:
        raise LatticeError(f"unknown tail family {kind!r}")


def _tail_remainder(kind: str, param: float, m: float, k_max: int) -> tuple[float, float]:
    """Unnormalized mass on 1..k_max and beyond k_max of the untruncated profile."""
    k = np.arange(1, k_max + 1)
    head = float(np.sum(_profile(kind, param, m, k)))
    if kind == EXPONENTIAL:
        rest = math.exp(-param * (k_max + 1)) / -math.expm1(-param)
    else:
        # terms beyond k_max decay at least geometrically with ratio r < 1
        r = ((k_max + 2) / (k_max + 1)) ** max(param, 0.0) / m
        if r >= 1:
            # ratio bound not yet useful; sum explicitly until it is
            extra = k_max + 1
            rest = 0.0
            while True:
                rest += extra**param * m**-extra
                r = ((extra + 2) / (extra + 1)) ** max(param, 0.0) / m
                extra += 1
                if r < 1:
                    rest += extra**param * m**-extra / (1 - r)
                    break
        else:
            rest = (k_max + 1) ** param * m ** -(k_max + 1) / (1 - r)
    return head, rest


def make_tail_family(kind: str, param: float, m: float = 2.0, k_max: int = 60) -> TailFamily:
    _validate(kind, param, m)
    if k_max < 2:
        raise LatticeError("k_max must be >= 2")
    k = np.arange(1, k_max + 1)
    w = _profile(kind, param, m, k)
    w = w / w.sum()
    head, rest = _tail_remainder(kind, param, m, k_max)
    surv = np.cumsum(w[::-1])[::-1]  # P(Y0 >= x) for x = 1..k_max
    ratio = surv / _profile(kind, param, m, k)
    pmf = LatticePmf(w, 1)
    return TailFamily(kind, float(param), float(m), k_max, pmf, rest / (head + rest),
                      float(ratio.min()), float(ratio.max()))


def choose_k_max(kind: str, param: float, m: float, p_min: float,
                 nu: OffspringLaw | None = None, k_min: int = 4, k_cap: int = 20_000) -> int:
    """Smallest k_max whose remainder is below 1e-3 p_min.

    For deterministic nu the truncated family also has a positive critical
    point; k_max is then raised until it sits below p_min / 100.
    """
    _validate(kind, param, m)
    k = k_min
    while k <= k_cap:
        head, rest = _tail_remainder(kind, param, m, k)
        if rest / (head + rest) < 1e-3 * p_min:
            if nu is None or not nu.is_deterministic:
                return k
            fam = make_tail_family(kind, param, m, k)
            if pc_theorem_a(fam.pmf, nu) <= p_min / 100:
                return k
        k = max(k + 1, int(k * 1.25))
    raise LatticeError("no admissible k_max below the cap")


# ---------------------------------------------------------------- fits

@dataclass
class FitReport:
    kind: str
    target: float
    band: tuple[float, float]
    p: list[float]
    F_low: list[float]
    F_high: list[float]
    admissible: list[bool]
    slope: float
    intercept: float
    residuals: list[float]
    monotone: bool
    passed: bool
    fit_tol: float
    k_max: list[int] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["band"] = list(self.band)
        return d


class FitError(RuntimeError):
    pass


def _default_nu(m: float, nu: OffspringLaw | None) -> OffspringLaw:
    if nu is not None:
        return nu
    if not float(m).is_integer():
        raise LatticeError("non-integer m needs an explicit offspring law")
    return OffspringLaw.deterministic(int(m))


def _sweep(kind: str, param: float, nu: OffspringLaw, p_grid, fit_tol: float, n_cap: int):
    p_grid = sorted(float(p) for p in p_grid)
    p_min = p_grid[0]
    k_max = choose_k_max(kind, param, nu.mean, p_min, nu)
    fam = make_tail_family(kind, param, nu.mean, k_max)
    lows, highs, ok = [], [], []
    for p in p_grid:
        fe = free_energy(fam.spec(nu, p), fit_tol, n_cap, relative=True)
        lows.append(fe.low)
        highs.append(fe.high)
        ok.append(bool(fe.reached and fe.low > 0))
    return p_grid, fam, lows, highs, ok


def grid_is_monotone(lows, highs) -> bool:
    """Certified intervals along increasing p never force a decrease of F."""
    return all(highs[i + 1] >= lows[i] for i in range(len(lows) - 1))


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float, np.ndarray]:
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept), y - (slope * x + intercept)


def fit_beta(theta: float, m: float = 2.0, p_grid=BETA_GRID, fit_tol: float = DEFAULT_FIT_TOL,
             band: float = 0.3, nu: OffspringLaw | None = None, n_cap: int = 400) -> FitReport:
    """Slope of log F against log p for the exponential family."""
    if not 0 < theta < math.log(m):
        raise LatticeError("need 0 < theta < log m")
    nu = _default_nu(m, nu)
    p, fam, lows, highs, ok = _sweep(EXPONENTIAL, theta, nu, p_grid, fit_tol, n_cap)
    sel = np.array(ok)
    if sel.sum() < 4:
        raise FitError(f"only {int(sel.sum())} admissible grid points; need 4")
    mid = 0.5 * (np.array(lows) + np.array(highs))
    x, y = np.log(np.array(p)[sel]), np.log(mid[sel])
    slope, intercept, res = _ols(x, y)
    target = beta_exponent(theta, nu.mean)
    lo, hi = target - band, target + band
    mono = grid_is_monotone(lows, highs)
    return FitReport("beta", target, (lo, hi), p, lows, highs, list(map(bool, sel)), slope,
                     intercept, res.tolist(), mono, bool(mono and lo <= slope <= hi), fit_tol,
                     [fam.k_max], {"remainder": fam.remainder, "c_low": fam.c_low,
                                   "c_high": fam.c_high})


def fit_chi(alpha: float, m: float = 2.0, p_grid=CHI_GRID, fit_tol: float = DEFAULT_FIT_TOL,
            band: float = 0.2, nu: OffspringLaw | None = None, n_cap: int = 400,
            with_gf_bound: bool = True) -> FitReport:
    """Slope of log log(1/F) against log(1/p) for the critical family.

    Also checks that p**chi log(1/F_high) stays bounded away from 0 on the
    grid: its minimum must be positive and at least a quarter of its maximum.
    """
    if not alpha > -2:
        raise LatticeError("need alpha > -2")
    nu = _default_nu(m, nu)
    p, fam, lows, highs, ok = _sweep(CRITICAL, alpha, nu, p_grid, fit_tol, n_cap)
    sel = np.array(ok)
    if sel.sum() < 4:
        raise FitError(f"only {int(sel.sum())} admissible grid points; need 4 "
                       f"(F intervals: {list(zip(p, lows, highs))})")
    mid = 0.5 * (np.array(lows) + np.array(highs))
    x = np.log(1 / np.array(p)[sel])
    y = np.log(np.log(1 / mid[sel]))
    slope, intercept, res = _ols(x, y)
    target = chi_exponent(alpha)
    lo, hi = target - band, target + band
    mono = grid_is_monotone(lows, highs)
    c5 = [pp**target * math.log(1 / h) for pp, h, s in zip(p, highs, sel) if s]
    c5_ok = min(c5) > 0 and min(c5) >= 0.25 * max(c5)
    extra = {"c5_profile": c5, "c5_bounded_below": bool(c5_ok), "remainder": fam.remainder,
             "c_low": fam.c_low, "c_high": fam.c_high}
    if with_gf_bound:
        bounds = [upper_bound_critical(fam.spec(nu, pp)) for pp in p]
        extra["gf_F_upper"] = [b.F_upper for b in bounds]
        extra["gf_established"] = [b.established for b in bounds]
        extra["gf_c5_profile"] = [pp**target * math.log(1 / b.F_upper) if b.F_upper > 0 else math.inf
                                  for pp, b in zip(p, bounds)]
    return FitReport("chi", target, (lo, hi), p, lows, highs, list(map(bool, sel)), slope,
                     intercept, res.tolist(), mono,
                     bool(mono and c5_ok and lo <= slope <= hi), fit_tol, [fam.k_max], extra)


# ---------------------------------------------------------------- near-critical scan

@dataclass
class ScanReport:
    p_c: float
    p: list[float]
    F_low: list[float]
    F_high: list[float]
    certified: list[bool]
    K_hat: float | None
    intercept: float | None
    residuals: list[float]
    monotone: bool
    partial: bool
    exploratory: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def conjecture_scan(spec: ModelSpec, p_lo: float, p_hi: float, points: int = 9,
                    p_c: float | None = None, fit_tol: float = 1e-3,
                    n_cap: int = 400) -> ScanReport:
    """Fit log(1/F) against (p - p_c)**-1/2 over a window above p_c.  Exploratory only."""
    if p_c is None:
        p_c = float(pc_theorem_a(spec.y0, spec.nu))
    if not p_c < p_lo < p_hi <= min(1.0, p_c + 0.3):
        raise LatticeError(f"window must satisfy p_c < p_lo < p_hi <= min(1, p_c + 0.3); "
                           f"p_c = {p_c}")
    if points < 2:
        raise LatticeError("need at least 2 points")
    grid = np.linspace(p_lo, p_hi, points).tolist()
    lows, highs, cert = [], [], []
    for p in grid:
        fe = free_energy(spec.with_p(p), fit_tol, n_cap, relative=True)
        lows.append(fe.low)
        highs.append(fe.high)
        cert.append(bool(fe.reached and fe.low > 0))
    sel = np.array(cert)
    mono = grid_is_monotone(lows, highs)
    if sel.sum() >= 2:
        x = (np.array(grid)[sel] - p_c) ** -0.5
        mid = 0.5 * (np.array(lows) + np.array(highs))[sel]
        k_hat, c, res = _ols(x, np.log(1 / mid))
        res = res.tolist()
    else:
        k_hat = c = None
        res = []
    return ScanReport(p_c, grid, lows, highs, cert, k_hat, c, res, mono, not bool(sel.all()))


# ---------------------------------------------------------------- leaf maximum

@dataclass
class MaxLeafRow:
    b: int
    p_exact: float
    p_hat: float
    se: float

    @property
    def holds(self) -> bool:
        return self.p_exact >= self.p_hat - 3 * self.se - 1e-12


def max_leaf_lower_bound_check(spec: ModelSpec, n: int, b_grid, trials: int = 100_000,
                               seed: int = 0, threads: int = 1) -> list[MaxLeafRow]:
    """P(X_n > b) from the lattice engine against sampled P(max leaf - n > b)."""
    from .trees import sample_max_leaf

    pmf = iterate(spec, n, None, keep_pmfs=True).pmfs[n]
    leaf = sample_max_leaf(spec, n, trials, seed, threads=threads) - n
    rows = []
    for b in b_grid:
        hit = (leaf > b).astype(float)
        p_hat = float(hit.mean())
        se = float(hit.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
        rows.append(MaxLeafRow(int(b), float(tail(pmf, b + 1)), p_hat, se))
    return rows
