import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drlab import ModelSpec, OffspringLaw, lattice
from drlab.engine import iterate
from drlab.experiments import make_tail_family
from drlab.gf import (
    beta_exponent,
    bounds_to_csv,
    chi_exponent,
    gf_trace,
    upper_bound_critical,
    upper_bound_power_law,
    verify_contraction,
)
from drlab.lattice import LatticeError, gf_eval, mean

NU2 = OffspringLaw.deterministic(2)


def example(p, nu=NU2, y0=None):
    return ModelSpec(nu, y0 or {2: 1.0}, p)


def critical_spec(p, alpha=0.0, k_max=400):
    return make_tail_family("critical", alpha, 2.0, k_max).spec(NU2, p)


def exponential_spec(p, theta=0.5 * math.log(2), k_max=400):
    return make_tail_family("exponential", theta, 2.0, k_max).spec(NU2, p)


def test_trace_deterministic_start():
    s = 1.3
    tr = gf_trace(example(1.0), s, 3)
    assert tr[0].G == pytest.approx(s**2)
    assert tr[1].G == pytest.approx(s**3)
    assert tr[1].G_scalar == pytest.approx(s**3)
    assert tr[0].zero == 0
    assert tr.consistent and not tr.truncated


def test_trace_zero_start():
    tr = gf_trace(example(0.0), 1.7, 5)
    assert all(pt.G == 1 and pt.a == 0 and pt.G_prime == 0 for pt in tr.points)


def test_trace_initial_values_bernoulli():
    p, s = 0.3, 1.8
    pt = gf_trace(example(p), s, 0)[0]
    assert pt.G == pytest.approx(1 - p + p * s**2)
    assert pt.G_prime == pytest.approx(2 * p * s)


def test_trace_requires_s_above_one():
    with pytest.raises(LatticeError):
        gf_trace(example(0.2), 1.0, 3)


@pytest.mark.parametrize("nu", [NU2, OffspringLaw.uniform([1, 3]), OffspringLaw.uniform([1, 2, 3])])
def test_scalar_recursion_matches_laws(nu):
    tr = gf_trace(example(0.15, nu, {1: 0.5, 3: 0.5}), 1.4, 12)
    assert tr.consistent
    exact_points = 0
    for pt in tr.points:
        assert pt.G >= 1 and pt.a >= 0 and pt.G_prime >= 0
        assert pt.G <= pt.G_scalar * (1 + 1e-9)
        if not tr.truncated or pt.n <= 8:
            exact_points += 1
            assert abs(pt.G - pt.G_scalar) <= 1e-9 * max(1, pt.G)
    assert exact_points >= 9


def test_fft_floor_is_charged_as_dropped_mass(monkeypatch):
    # wide supports push the convolutions onto the FFT path; the far tail is
    # below round-off there and must show up as dropped mass, not as noise
    spec = example(0.15, OffspringLaw.uniform([1, 3]), {1: 0.5, 3: 0.5})
    tr = iterate(spec, 11, None, keep_pmfs=True)
    last = tr.pmfs[-1]
    assert last.dropped > 0
    assert math.isfinite(gf_eval(last, 1.4))
    assert abs(float(last.weights.sum()) + last.dropped - 1) <= 1e-12
    monkeypatch.setattr(lattice, "FFT_CROSSOVER", 1 << 62)
    direct = iterate(spec, 11, None)
    for g, d in zip(tr.generations, direct.generations):
        assert g.mean_low <= d.mean_high * (1 + 1e-12)
        assert d.mean_low <= g.mean_high * (1 + 1e-12)


def test_truncated_trace_is_flagged_not_compared():
    tr = gf_trace(example(0.6), 1.2, 25, budget=1e-6)
    assert tr.truncated


def test_contraction_examples():
    assert verify_contraction(gf_trace(example(0.0), 1.5, 10)).holds
    rep = verify_contraction(gf_trace(example(0.05), 1.5, 30))
    assert rep.holds and rep.n1 is None and rep.checked_upto == 30
    assert rep.min_margin == pytest.approx(0.440625, rel=1e-9)  # regression record
    hot = verify_contraction(gf_trace(example(1.0), 1.5, 10))
    assert hot.holds and hot.n1 == 0 and hot.checked_upto == 0


def test_contraction_not_applicable_above_m():
    rep = verify_contraction(gf_trace(example(0.05), 2.5, 5))
    assert not rep.applicable


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 0.6), st.floats(1.05, 3.0))
def test_jensen_bound_on_exact_iterates(p, s):
    tr = iterate(example(p), 8, None, keep_pmfs=True)
    gt = gf_trace(example(p), s, 8)
    for pmf, pt in zip(tr.pmfs, gt.points):
        if math.isfinite(pt.a):
            assert mean(pmf) <= math.log1p(pt.a) / math.log(s) * (1 + 1e-12) + 1e-15


def test_critical_bound_trivial_and_consistent():
    assert upper_bound_critical(critical_spec(0.5), p=0.0).F_upper == 0
    p = 0.02
    b = upper_bound_critical(critical_spec(p))
    assert b.established and math.isfinite(b.F_upper)
    tr = iterate(critical_spec(p), b.N, 1e-40)
    lo, hi = tr.sandwich_raw(b.N)
    # Jensen puts the bound above E(X_N)/m**N, and hence above every lower sandwich value
    assert b.F_upper >= hi * (1 - 1e-12)
    assert b.F_upper >= lo


def test_critical_bound_decreases_with_p():
    grid = [2.0**-k for k in range(3, 10)]
    values = [upper_bound_critical(critical_spec(p)).F_upper for p in grid]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_critical_bound_not_established_when_c7_too_small():
    b = upper_bound_critical(critical_spec(0.2), c7=2.0**-12)
    assert not b.established and b.F_upper == math.inf


def test_power_law_bound_exponent():
    # ratio log F_upper / log p approaches beta = 2 slowly; it is within 0.3 from p = 2**-80
    ratios = []
    for e in (40, 80, 160):
        p = 2.0**-e
        b = upper_bound_power_law(exponential_spec(p, k_max=4 * e + 200))
        assert b.established
        ratios.append(math.log(b.F_upper) / math.log(p))
    assert ratios == sorted(ratios)
    assert abs(ratios[-1] - 2) <= 0.3 and abs(ratios[-2] - 2) <= 0.3


def test_power_law_needs_theta_below_log_m():
    with pytest.raises(LatticeError):
        upper_bound_power_law(exponential_spec(0.01, theta=1.0))


def test_exponent_formulas():
    assert beta_exponent(0.5 * math.log(2), 2) == pytest.approx(2.0)
    assert beta_exponent(1e-9, 2) == pytest.approx(1.0, abs=1e-8)
    assert chi_exponent(0.0) == 0.5
    assert chi_exponent(1e9) < 1e-8


def test_bounds_csv_columns():
    text = bounds_to_csv([upper_bound_critical(critical_spec(0.05))])
    assert text.splitlines()[0] == "p,s,N,a_N,F_upper,established"
