from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drlab import lattice
from drlab.lattice import (
    LatticeError,
    LatticePmf,
    ModelSpec,
    OffspringLaw,
    convolve,
    dr_step,
    gf_deriv,
    gf_eval,
    gf_excess,
    make_initial,
    mean,
    mean_upper,
    stochastically_dominates,
    tail,
    truncate,
)

from oracles import law_by_enumeration

F = Fraction
NU2 = OffspringLaw.deterministic(2)


def pmf(d, exact=False, **kw):
    return LatticePmf.from_masses(d, exact=exact, **kw)


def as_float_dict(p):
    return {k: float(v) for k, v in p.masses.items()}


# construction and validation


def test_masses_must_sum_to_one():
    with pytest.raises(LatticeError):
        pmf({0: 0.5, 1: 0.4})


def test_negative_mass_rejected():
    with pytest.raises(LatticeError):
        pmf({0: 1.2, 1: -0.2})


def test_dropped_bound_requires_dropped_mass():
    with pytest.raises(LatticeError):
        pmf({0: 1.0}, dropped_mean_bound=0.1)


def test_offspring_law_needs_supercritical_mean():
    with pytest.raises(LatticeError):
        OffspringLaw({1: 1})
    with pytest.raises(LatticeError):
        OffspringLaw({0: 0.5, 2: 0.5})
    assert OffspringLaw.uniform([1, 2]).mean == 1.5


def test_model_rejects_bad_p_and_zero_mass_y0():
    with pytest.raises(LatticeError):
        ModelSpec(NU2, {2: 1.0}, 1.5)
    with pytest.raises(LatticeError):
        ModelSpec(NU2, {0: 0.5, 2: 0.5}, 0.5)


def test_json_round_trip():
    p = pmf({0: 0.8, 2: 0.2})
    doc = p.to_dict()
    assert doc == {"step": "1/1", "masses": {"0": 0.8, "2": 0.2}, "dropped": 0.0,
                   "dropped_mean_bound": 0.0}
    back = LatticePmf.from_json(p.to_json())
    assert as_float_dict(back) == {0: 0.8, 2: 0.2}


# make_initial


def test_make_initial_degenerate_mixtures():
    assert make_initial(ModelSpec(NU2, {2: 1.0}, 0)).masses == {0: 1}
    assert as_float_dict(make_initial(ModelSpec(NU2, {2: 1.0}, 1))) == {2: 1.0}


def test_make_initial_example_mixture():
    x0 = make_initial(ModelSpec(NU2, {2: 1}, F(1, 5)))
    assert x0.masses == {0: F(4, 5), 2: F(1, 5)}
    assert x0.dropped == 0


# convolve


def test_convolve_identity_and_points():
    q = pmf({1: 0.3, 4: 0.7})
    assert as_float_dict(convolve(LatticePmf.point(0), q)) == pytest.approx({1: 0.3, 4: 0.7})
    assert convolve(LatticePmf.point(2, exact=True), LatticePmf.point(3, exact=True)).masses == {5: 1}


def test_convolve_bernoulli_square():
    a = pmf({0: F(4, 5), 2: F(1, 5)}, exact=True)
    assert convolve(a, a).masses == {0: F(16, 25), 2: F(8, 25), 4: F(1, 25)}


def test_convolve_rejects_mismatched_steps():
    with pytest.raises(LatticeError):
        convolve(LatticePmf.point(1), LatticePmf.point(1, step=F(1, 2)))


def test_fft_path_agrees_with_direct(monkeypatch):
    rng = np.random.default_rng(3)
    w = rng.random(300)
    a = LatticePmf(w / w.sum())
    direct = convolve(a, a).weights
    monkeypatch.setattr(lattice, "FFT_CROSSOVER", 0)
    via_fft = convolve(a, a).weights
    assert np.max(np.abs(direct - via_fft)) <= 1e-10


# dr_step


def test_dr_step_examples():
    out = dr_step(pmf({0: F(1, 2), 2: F(1, 2)}, exact=True), NU2)
    assert out.masses == {0: F(1, 4), 1: F(1, 2), 3: F(1, 4)}
    assert mean(out) == F(5, 4)
    assert dr_step(LatticePmf.point(2, exact=True), NU2).masses == {3: 1}
    for nu in (NU2, OffspringLaw.uniform([1, 3])):
        assert dr_step(LatticePmf.point(0, exact=True), nu).masses == {0: 1}


def test_dr_step_fractional_lattice():
    half = F(1, 2)
    x = LatticePmf.from_masses({1: F(1, 2), 3: F(1, 2)}, step=half, exact=True)  # values 1/2, 3/2
    out = dr_step(x, NU2)
    # sums 1, 2, 3 with probs 1/4, 1/2, 1/4; minus 1 -> 0, 1, 2 i.e. indices 0, 2, 4
    assert out.masses == {0: F(1, 4), 2: F(1, 2), 4: F(1, 4)}
    assert out.step == half


def test_dr_step_rejects_step_not_dividing_one():
    x = LatticePmf.from_masses({1: 1.0}, step=F(2, 3))
    with pytest.raises(LatticeError):
        dr_step(x, NU2)


# truncate


def test_truncate_examples():
    p = pmf({0: 0.9, 10: 0.1})
    t = truncate(p, 0.2)
    assert as_float_dict(t) == {0: 0.9}
    assert t.dropped == pytest.approx(0.1)
    assert t.dropped_mean_bound == pytest.approx(1.0)
    tiny = truncate(p, 1e-3)
    assert tiny is p


def test_truncate_requires_positive_budget():
    with pytest.raises(LatticeError):
        truncate(pmf({0: 0.5, 1: 0.5}), 0.0)


def test_truncated_iterates_enclose_exact_mean():
    nu = OffspringLaw({1: F(1, 2), 3: F(1, 2)})
    spec = ModelSpec(nu, {1: F(1, 2), 3: F(1, 2)}, F(1, 3))
    exact = make_initial(spec)
    cut = make_initial(spec)
    for n in range(1, 5):
        exact = dr_step(exact, nu)
        cut = truncate(dr_step(cut, nu), F(1, 10**4))
        assert mean(cut) <= mean(exact) <= mean_upper(cut)
        assert stochastically_dominates(exact, cut)
    assert cut.dropped > 0


# statistics


def test_mean_tail_gf():
    x0 = pmf({0: F(4, 5), 2: F(1, 5)}, exact=True)
    assert mean(LatticePmf.point(0)) == 0
    assert tail(x0, 1) == F(1, 5)
    assert gf_eval(x0, 3) == F(4, 5) + F(9, 5)
    assert gf_deriv(x0, 3) == 2 * F(1, 5) * 3
    xf = x0.to_float()
    s = 1.7
    assert gf_eval(xf, s) == pytest.approx(0.8 + 0.2 * s**2)
    assert gf_excess(xf, s) == pytest.approx(0.2 * (s**2 - 1))


# properties

nu_laws = st.sampled_from([{2: 1}, {3: 1}, {1: F(1, 2), 2: F(1, 2)}, {1: F(1, 2), 3: F(1, 2)},
                           {1: F(1, 3), 2: F(1, 3), 3: F(1, 3)}])
y0_laws = st.dictionaries(st.integers(1, 3), st.integers(1, 4), min_size=1, max_size=3).map(
    lambda d: {k: F(v, sum(d.values())) for k, v in d.items()})
probs = st.fractions(0, 1, max_denominator=7)


@settings(max_examples=25, deadline=None)
@given(nu_laws, y0_laws, probs)
def test_mass_conserved_in_float_mode(nu, y0, p):
    law = OffspringLaw(nu)
    x = make_initial(ModelSpec(law, y0, p)).to_float()
    for _ in range(4):
        x = dr_step(x, law)
        assert abs(float(x.weights.sum()) + x.dropped - 1) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(nu_laws, y0_laws, probs, probs)
def test_dr_step_preserves_stochastic_order(nu, y0, p1, p2):
    law = OffspringLaw(nu)
    lo, hi = sorted([p1, p2])
    a = make_initial(ModelSpec(law, y0, hi))
    b = make_initial(ModelSpec(law, y0, lo))
    for _ in range(3):
        assert stochastically_dominates(a, b)
        a, b = dr_step(a, law), dr_step(b, law)
    assert stochastically_dominates(a, b)


@settings(max_examples=15, deadline=None)
@given(nu_laws, y0_laws, probs)
def test_matches_enumeration_at_depth_three(nu, y0, p):
    law = OffspringLaw(nu)
    x = make_initial(ModelSpec(law, y0, p))
    for _ in range(3):
        x = dr_step(x, law)
    assert x.masses == law_by_enumeration(nu, y0, p, 3)
