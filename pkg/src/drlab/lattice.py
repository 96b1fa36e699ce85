"""Lattice probability mass functions and one step of the max-type recursion.

A :class:`LatticePmf` lives on ``{0, h, 2h, ...}``.  Masses are stored densely
from an integer ``offset`` so that point masses far from the origin stay cheap.
Two arithmetic modes share every code path: float64 arrays, and object arrays
of :class:`fractions.Fraction` for exact oracle checks.

Truncation never loses track of probability: ``dropped`` carries the mass that
was removed (and everything it later combined with), ``dropped_mean_bound`` an
upper bound on how much expectation that mass can still carry.  The kept mean
is therefore a lower bound on the true mean and ``mean + dropped_mean_bound``
an upper bound.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import logsumexp

MASS_TOL = 1e-12

# length product above which float convolutions go through the FFT
FFT_CROSSOVER = 1 << 22
# FFT entries below this multiple of eps * log2(n) * |a|_2 * |b|_2 count as noise;
# measured errors stay below a tenth of it
FFT_NOISE_FACTOR = 8.0


class LatticeError(ValueError):
    """Invalid lattice distribution, offspring law or model."""


def _as_step(step) -> Fraction:
    if isinstance(step, str):
        step = Fraction(step)
    step = Fraction(step).limit_denominator(10**9) if isinstance(step, float) else Fraction(step)
    if step <= 0:
        raise LatticeError(f"lattice step must be positive, got {step}")
    return step


def _zero(exact: bool):
    return Fraction(0) if exact else 0.0


@dataclass(frozen=True, eq=False)
class LatticePmf:
    """Sub-probability mass function on the lattice ``step * {0, 1, 2, ...}``.

    ``weights[i]`` is the mass at lattice index ``offset + i``.
    """

    weights: np.ndarray
    offset: int = 0
    step: Fraction = Fraction(1)
    dropped: float | Fraction = 0.0
    dropped_mean_bound: float | Fraction = 0.0

    def __post_init__(self):
        w = self.weights
        if not isinstance(w, np.ndarray):
            w = np.asarray(w)
        exact = w.dtype == object
        if not exact:
            w = np.ascontiguousarray(w, dtype=np.float64)
        w, off = _trim(w, int(self.offset))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "step", _as_step(self.step))
        if exact:
            object.__setattr__(self, "dropped", Fraction(self.dropped))
            object.__setattr__(self, "dropped_mean_bound", Fraction(self.dropped_mean_bound))
        else:
            object.__setattr__(self, "dropped", float(self.dropped))
            object.__setattr__(self, "dropped_mean_bound", float(self.dropped_mean_bound))
        if self.offset < 0:
            raise LatticeError("lattice indices must be nonnegative")
        if len(w) and min(w) < 0:
            raise LatticeError("masses must be nonnegative")
        if self.dropped < 0 or self.dropped_mean_bound < 0:
            raise LatticeError("dropped mass and its mean bound must be nonnegative")
        total = sum(w) + self.dropped if exact else float(w.sum()) + self.dropped
        if abs(total - 1) > MASS_TOL:
            raise LatticeError(f"total mass {float(total)!r} is not 1 within {MASS_TOL}")
        if self.dropped == 0 and self.dropped_mean_bound != 0:
            raise LatticeError("dropped_mean_bound must vanish when nothing was dropped")

    # construction helpers -------------------------------------------------

    @classmethod
    def from_masses(cls, masses: Mapping[int, float], step=1, exact: bool = False,
                    dropped=0, dropped_mean_bound=0) -> "LatticePmf":
        if not masses:
            raise LatticeError("empty support")
        keys = [int(k) for k in masses]
        lo, hi = min(keys), max(keys)
        if exact:
            w = np.array([Fraction(0)] * (hi - lo + 1), dtype=object)
            for k, v in masses.items():
                w[int(k) - lo] += Fraction(v)
        else:
            w = np.zeros(hi - lo + 1)
            for k, v in masses.items():
                w[int(k) - lo] += float(v)
        return cls(w, lo, step, dropped, dropped_mean_bound)

    @classmethod
    def point(cls, index: int, step=1, exact: bool = False) -> "LatticePmf":
        return cls.from_masses({index: 1}, step=step, exact=exact)

    # views ----------------------------------------------------------------

    @property
    def exact(self) -> bool:
        return self.weights.dtype == object

    @property
    def masses(self) -> dict[int, float | Fraction]:
        return {self.offset + i: v for i, v in enumerate(self.weights) if v != 0}

    @property
    def max_index(self) -> int:
        return self.offset + len(self.weights) - 1

    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.weights != 0))

    @property
    def total_mass(self):
        return sum(self.weights) if self.exact else float(self.weights.sum())

    def values(self) -> np.ndarray:
        """Real values of the stored atoms (float)."""
        return (np.arange(len(self.weights)) + self.offset) * float(self.step)

    def mass_at(self, index: int):
        i = index - self.offset
        if 0 <= i < len(self.weights):
            return self.weights[i]
        return _zero(self.exact)

    def to_float(self) -> "LatticePmf":
        if not self.exact:
            return self
        return LatticePmf(self.weights.astype(np.float64), self.offset, self.step,
                          float(self.dropped), float(self.dropped_mean_bound))

    def to_exact(self) -> "LatticePmf":
        if self.exact:
            return self
        w = np.array([Fraction(float(v)) for v in self.weights], dtype=object)
        return LatticePmf(w, self.offset, self.step, Fraction(self.dropped),
                          Fraction(self.dropped_mean_bound))

    def to_dict(self) -> dict:
        return {
            "step": f"{self.step.numerator}/{self.step.denominator}",
            "masses": {str(k): float(v) for k, v in self.masses.items()},
            "dropped": float(self.dropped),
            "dropped_mean_bound": float(self.dropped_mean_bound),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping) -> "LatticePmf":
        masses = {int(k): float(v) for k, v in d["masses"].items()}
        return cls.from_masses(masses, step=d.get("step", "1/1"),
                               dropped=d.get("dropped", 0.0),
                               dropped_mean_bound=d.get("dropped_mean_bound", 0.0))

    @classmethod
    def from_json(cls, text: str) -> "LatticePmf":
        return cls.from_dict(json.loads(text))

    def __repr__(self):
        atoms = ", ".join(f"{k}: {float(v):.6g}" for k, v in list(self.masses.items())[:8])
        more = ", ..." if self.support_size > 8 else ""
        return f"LatticePmf(step={self.step}, {{{atoms}{more}}}, dropped={float(self.dropped):.3g})"


def _trim(w: np.ndarray, offset: int) -> tuple[np.ndarray, int]:
    nz = np.flatnonzero(w != 0)
    if len(nz) == 0:
        return w[:0], 0
    return w[nz[0]:nz[-1] + 1], offset + int(nz[0])


@dataclass(frozen=True, eq=False)
class OffspringLaw:
    """Finite-support law of the number of copies entering one step."""

    probs: Mapping[int, float | Fraction]
    mean: float = field(init=False)

    def __post_init__(self):
        probs = {int(k): v for k, v in self.probs.items() if v != 0}
        if not probs:
            raise LatticeError("offspring law has empty support")
        if min(probs) < 1:
            raise LatticeError("offspring counts must be >= 1")
        if any(v < 0 for v in probs.values()):
            raise LatticeError("offspring probabilities must be nonnegative")
        if abs(float(sum(probs.values())) - 1) > MASS_TOL:
            raise LatticeError("offspring probabilities must sum to 1")
        object.__setattr__(self, "probs", dict(sorted(probs.items())))
        m = float(sum(k * v for k, v in probs.items()))
        if m <= 1:
            raise LatticeError(f"mean offspring number must exceed 1, got {m}")
        object.__setattr__(self, "mean", m)

    @classmethod
    def deterministic(cls, k: int) -> "OffspringLaw":
        return cls({k: 1})

    @classmethod
    def uniform(cls, ks) -> "OffspringLaw":
        ks = list(ks)
        return cls({k: Fraction(1, len(ks)) for k in ks})

    @property
    def is_deterministic(self) -> bool:
        return len(self.probs) == 1

    @property
    def max_count(self) -> int:
        return max(self.probs)

    def h(self, x):
        """Generating function E(x**nu); works on floats and Fractions."""
        return sum(v * x**k for k, v in self.probs.items())

    def h_prime(self, x):
        return sum(v * k * x ** (k - 1) for k, v in self.probs.items())

    def factorial_moment2(self) -> float:
        """E[nu (nu - 1)]."""
        return float(sum(v * k * (k - 1) for k, v in self.probs.items()))

    def to_dict(self) -> dict:
        return {str(k): float(v) for k, v in self.probs.items()}


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Offspring law, positive part Y0 and mixing weight p of X0."""

    nu: OffspringLaw
    y0: LatticePmf
    p: float | Fraction
    family: dict | None = None

    def __post_init__(self):
        if isinstance(self.y0, Mapping):
            exact = all(isinstance(v, (int, Fraction)) for v in self.y0.values())
            object.__setattr__(self, "y0", LatticePmf.from_masses(self.y0, exact=exact))
        if not 0 <= self.p <= 1:
            raise LatticeError(f"p must lie in [0, 1], got {self.p}")
        if self.y0.mass_at(0) != 0:
            raise LatticeError("Y0 must put no mass at 0")
        if self.y0.support_size == 0:
            raise LatticeError("Y0 has empty support")

    @property
    def m(self) -> float:
        return self.nu.mean

    def with_p(self, p) -> "ModelSpec":
        return ModelSpec(self.nu, self.y0, p, self.family)


def make_initial(spec: ModelSpec) -> LatticePmf:
    """Law of X0 = (1-p) delta_0 + p * law(Y0)."""
    y0 = spec.y0
    p = Fraction(spec.p) if y0.exact else float(spec.p)
    if p == 0:
        return LatticePmf.point(0, step=y0.step, exact=y0.exact)
    if p == 1:
        return y0
    n = y0.max_index + 1
    w = np.array([_zero(y0.exact)] * n, dtype=object) if y0.exact else np.zeros(n)
    w[y0.offset:] = y0.weights * p
    w[0] = w[0] + (1 - p)
    return LatticePmf(w, 0, y0.step, p * y0.dropped, p * y0.dropped_mean_bound)


def _raw_convolve(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float, np.ndarray | None]:
    """Convolution plus the FFT noise floor and the entries zeroed below it.

    The direct path returns ``(out, 0.0, None)``.  Above the crossover, entries
    below ``floor`` cannot be told apart from round-off; they are set to 0 and
    reported so that callers can charge up to ``floor`` per entry as dropped.
    """
    if a.dtype != object and len(a) * len(b) > FFT_CROSSOVER:
        out = fftconvolve(a, b)
        floor = FFT_NOISE_FACTOR * np.finfo(float).eps * math.log2(len(out)) \
            * float(np.linalg.norm(a)) * float(np.linalg.norm(b))
        mask = out < floor
        out[mask] = 0.0
        return out, floor, mask
    return np.convolve(a, b), 0.0, None


def _clipped(floor: float, mask: np.ndarray | None, first_index: int) -> tuple[float, float]:
    """Mass and index-weighted mass charged for entries zeroed by the FFT path."""
    if mask is None:
        return 0.0, 0.0
    idx = np.flatnonzero(mask)
    return floor * len(idx), floor * float(np.sum(idx + first_index))


def _kept_mean(pmf: LatticePmf):
    if pmf.exact:
        return sum((pmf.offset + i) * v for i, v in enumerate(pmf.weights)) * pmf.step
    return float(np.dot(pmf.values(), pmf.weights))


def convolve(a: LatticePmf, b: LatticePmf) -> LatticePmf:
    """Law of the sum of independent draws from ``a`` and ``b``."""
    if a.step != b.step:
        raise LatticeError(f"lattice steps differ: {a.step} vs {b.step}")
    if a.exact != b.exact:
        a, b = a.to_exact(), b.to_exact()
    w, floor, mask = _raw_convolve(a.weights, b.weights)
    da, db = a.dropped, b.dropped
    ma, mb = _kept_mean(a), _kept_mean(b)
    dropped = da + db - da * db
    # a dropped copy takes the other copy's full true mean with it
    bound = (a.dropped_mean_bound + b.dropped_mean_bound
             + db * (ma + a.dropped_mean_bound) + da * (mb + b.dropped_mean_bound))
    if mask is not None:
        cm, cx = _clipped(floor, mask, a.offset + b.offset)
        dropped = min(dropped + cm, 1.0)
        bound = bound + cx * float(a.step)
        total = w.sum()
        if total > 0:
            w *= (1.0 - dropped) / total
    return LatticePmf(w, a.offset + b.offset, a.step, dropped, bound)


def _shift_units(step: Fraction) -> int:
    units = 1 / step
    if units.denominator != 1:
        raise LatticeError(f"lattice step {step} does not divide 1")
    return int(units)


def dr_step(pmf: LatticePmf, nu: OffspringLaw) -> LatticePmf:
    """One application of X -> (X_1 + ... + X_nu - 1)^+ on lattice laws."""
    shift = _shift_units(pmf.step)
    exact = pmf.exact
    if len(pmf.weights) == 0:
        return pmf
    probs = {k: (Fraction(v) if exact else float(v)) for k, v in nu.probs.items()}
    kmin, kmax = min(probs), max(probs)
    lo = kmin * pmf.offset
    size = kmax * pmf.max_index - lo + 1
    acc = np.array([Fraction(0)] * size, dtype=object) if exact else np.zeros(size)
    power = pmf.weights
    # mass and index-weighted mass the FFT floor may have removed from the k-th power
    miss, miss_x, lost, lost_x = 0.0, 0.0, 0.0, 0.0
    if not exact:
        w_mass = float(pmf.weights.sum())
        w_x = float(np.dot(pmf.weights, np.arange(len(pmf.weights)) + pmf.offset))
    for k in range(1, kmax + 1):
        if k > 1:
            power, floor, mask = _raw_convolve(power, pmf.weights)
            if mask is not None or miss > 0:
                cm, cx = _clipped(floor, mask, k * pmf.offset)
                miss, miss_x = miss * w_mass + cm, miss_x * w_mass + miss * w_x + cx
        if k in probs:
            start = k * pmf.offset - lo
            acc[start:start + len(power)] += probs[k] * power
            lost += probs[k] * miss
            lost_x += probs[k] * miss_x
    # indices (lo + i) <= shift collapse onto 0, the rest move down by shift
    cut = shift - lo + 1
    if cut > 0:
        head = sum(acc[:cut]) if exact else float(acc[:cut].sum())
        body = acc[cut:]
        if exact:
            out = np.concatenate([np.array([head], dtype=object), body])
        else:
            out = np.concatenate([[head], body])
        new_offset = 0
    else:
        out = acc
        new_offset = lo - shift

    d = pmf.dropped
    if d == 0:
        dropped, bound = d, pmf.dropped_mean_bound
    else:
        mk, b = _kept_mean(pmf), pmf.dropped_mean_bound
        if exact:
            dropped = 1 - sum(v * (1 - d) ** k for k, v in probs.items())
        else:
            dropped = sum(-v * math.expm1(k * math.log1p(-d)) for k, v in probs.items())
        bound = sum(v * k * (b + (k - 1) * d * (mk + b)) for k, v in probs.items())
    if lost > 0:
        # (x - 1)^+ <= x, so the pre-shift index mass bounds the lost mean
        dropped = min(dropped + lost, 1.0)
        bound = bound + lost_x * float(pmf.step)
    if not exact:
        # kept mass is known exactly; squaring would otherwise double its round-off each step
        total = out.sum()
        if total > 0:
            out *= (1.0 - dropped) / total
    return LatticePmf(out, new_offset, pmf.step, dropped, bound)


def truncate(pmf: LatticePmf, tail_mass_budget: float) -> LatticePmf:
    """Drop the largest atoms whose combined mass stays within the budget."""
    if tail_mass_budget <= 0:
        raise LatticeError("truncation budget must be positive")
    w = pmf.weights
    if len(w) <= 1:
        return pmf
    if pmf.exact:
        budget = Fraction(tail_mass_budget)
        tail = np.cumsum(w[::-1])[::-1]
        keep = next((i for i in range(1, len(w)) if tail[i] <= budget), len(w))
    else:
        tail = np.cumsum(w[::-1])[::-1]
        idx = np.flatnonzero(tail[1:] <= tail_mass_budget)
        keep = int(idx[0]) + 1 if len(idx) else len(w)
    if keep >= len(w):
        return pmf
    removed = w[keep:]
    vals = (np.arange(keep, len(w)) + pmf.offset)
    if pmf.exact:
        rmass = sum(removed)
        rmean = sum(int(x) * v for x, v in zip(vals, removed)) * pmf.step
    else:
        rmass = float(removed.sum())
        rmean = float(np.dot(vals * float(pmf.step), removed))
    return LatticePmf(w[:keep], pmf.offset, pmf.step, pmf.dropped + rmass,
                      pmf.dropped_mean_bound + rmean)


def mean(pmf: LatticePmf):
    """Kept mean: a lower bound on the true mean, exact when nothing was dropped."""
    return _kept_mean(pmf)


def mean_upper(pmf: LatticePmf):
    return _kept_mean(pmf) + pmf.dropped_mean_bound


def tail(pmf: LatticePmf, t) -> float:
    """Kept mass at values >= t."""
    vals = pmf.values()
    sel = vals >= float(t) - 1e-12
    if pmf.exact:
        return sum(v for v, s in zip(pmf.weights, sel) if s)
    return float(pmf.weights[sel].sum())


def zero_mass(pmf: LatticePmf):
    return pmf.mass_at(0)


def gf_eval(pmf: LatticePmf, s):
    """E(s**X) over the kept atoms."""
    if pmf.exact and isinstance(s, (int, Fraction)) and pmf.step.denominator == 1:
        s = Fraction(s)
        return sum(v * s ** ((pmf.offset + i) * int(pmf.step)) for i, v in enumerate(pmf.weights))
    w = pmf.weights.astype(np.float64)
    pos = w > 0
    if not pos.any():
        return 0.0
    # log space keeps huge s**x against tiny masses finite
    with np.errstate(over="ignore"):
        return float(np.exp(logsumexp(np.log(w[pos]) + pmf.values()[pos] * math.log(s))))


def gf_excess(pmf: LatticePmf, s: float) -> float:
    """E(s**X) - 1 for a law with nothing dropped, free of cancellation."""
    w = pmf.weights.astype(np.float64)
    pos = w > 0
    expo = pmf.values()[pos] * math.log(s)
    if len(expo) and expo.max() > 700:
        return gf_eval(pmf, s) - float(w.sum())
    return float(np.dot(w[pos], np.expm1(expo)))


def gf_deriv(pmf: LatticePmf, s):
    """d/ds E(s**X) over the kept atoms."""
    if pmf.exact and isinstance(s, (int, Fraction)) and pmf.step.denominator == 1:
        s = Fraction(s)
        h = int(pmf.step)
        return sum(v * (pmf.offset + i) * h * s ** ((pmf.offset + i) * h - 1)
                   for i, v in enumerate(pmf.weights) if pmf.offset + i > 0)
    x = pmf.values()
    w = pmf.weights.astype(np.float64)
    pos = (x > 0) & (w > 0)
    if not pos.any():
        return 0.0
    with np.errstate(over="ignore"):
        return float(np.exp(logsumexp(np.log(w[pos] * x[pos]) + (x[pos] - 1) * math.log(s))))


def stochastically_dominates(a: LatticePmf, b: LatticePmf, tol: float = 1e-12) -> bool:
    """True when P(A >= t) >= P(B >= t) for every lattice point t."""
    if a.step != b.step:
        raise LatticeError("lattice steps differ")
    top = max(a.max_index, b.max_index)
    ta = np.zeros(top + 2)
    tb = np.zeros(top + 2)
    ta[a.offset:a.max_index + 1] = a.weights.astype(np.float64)
    tb[b.offset:b.max_index + 1] = b.weights.astype(np.float64)
    ta = np.cumsum(ta[::-1])[::-1]
    tb = np.cumsum(tb[::-1])[::-1]
    return bool(np.all(ta >= tb - tol))
