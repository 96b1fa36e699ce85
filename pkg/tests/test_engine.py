from fractions import Fraction

import pytest

from drlab import ModelSpec, OffspringLaw
from drlab.engine import (
    TRACE_COLUMNS,
    best_interval,
    free_energy,
    free_energy_sandwich,
    iterate,
    sandwich_is_monotone,
)

from oracles import law_by_enumeration, mean_of

F = Fraction
NU2 = OffspringLaw.deterministic(2)


def example(p, nu=NU2, y0=None):
    return ModelSpec(nu, y0 or {2: 1.0}, p)


def test_deterministic_start_closed_form():
    tr = iterate(example(1.0), 12, None)
    for g in tr.generations:
        assert g.mean_low == g.mean_high == 2**g.n + 1
    assert free_energy_sandwich(tr, 3) == (1.0, 9 / 8)


def test_zero_start_stays_zero():
    tr = iterate(example(0.0), 6)
    assert all(g.mean_high == 0 for g in tr.generations)
    lo, hi = free_energy_sandwich(tr, 6)
    assert lo <= 0 and hi == 0


def test_first_generation_mean():
    g = iterate(example(0.5), 1).generations[1]
    assert g.mean_low <= 1.25 <= g.mean_high


def test_width_is_exact_without_truncation():
    tr = iterate(example(0.5), 8, None)
    for g in tr.generations:
        lo, hi = tr.sandwich_raw(g.n)
        assert hi - lo == pytest.approx(1 / 2**g.n, rel=1e-12)


def test_sandwich_against_missing_generation():
    with pytest.raises(IndexError):
        free_energy_sandwich(iterate(example(0.5), 2), 5)


def test_free_energy_closed_form_and_zero():
    fe = free_energy(example(1.0), 1e-6)
    assert fe.reached and fe.low <= 1 <= fe.high and fe.width <= 1e-6
    zero = free_energy(example(0.0), 1e-6)
    assert (zero.low, zero.high, zero.stop_reason) == (0.0, 0.0, "exact")


def test_free_energy_against_enumeration_at_depth_four():
    e4 = mean_of(law_by_enumeration({2: 1}, {2: 1}, F(1, 2), 4))
    lo4, hi4 = (float(e4) - 1) / 16, float(e4) / 16
    fe = free_energy(example(0.5), 1e-9)
    assert 0 < fe.low <= fe.high < 2 * 0.5 + 0.25
    assert fe.low <= hi4 and fe.high >= lo4


def test_trace_csv_columns():
    text = iterate(example(0.3), 3).to_csv()
    header, *rows = text.strip().split("\n")
    assert header.split(",") == TRACE_COLUMNS
    assert len(rows) == 4


@pytest.mark.parametrize("p", [0.1, 0.2, 0.3, 0.7])
@pytest.mark.parametrize("nu", [NU2, OffspringLaw.uniform([1, 3]), OffspringLaw.deterministic(3)])
def test_sandwich_monotone_and_nested(p, nu):
    tr = iterate(example(p, nu), 40, 1e-40)
    assert sandwich_is_monotone(tr)
    lo, hi, _ = best_interval(tr)
    for g in tr.generations:
        a, b = tr.sandwich_raw(g.n)
        width = g.dropped_mean_bound / nu.mean**g.n
        assert a <= hi + width + 1e-12 and b >= lo - width - 1e-12


def test_means_monotone_in_p():
    grid = [0.1, 0.2, 0.25, 0.4]
    traces = [iterate(example(p), 15) for p in grid]
    for a, b in zip(traces, traces[1:]):
        for ga, gb in zip(a.generations, b.generations):
            assert ga.mean_low <= gb.mean_high + 1e-12


@pytest.mark.parametrize("nu", [{2: 1}, {1: F(1, 2), 3: F(1, 2)}, {1: F(1, 3), 2: F(2, 3)}])
def test_one_step_mean_inequalities(nu):
    law = OffspringLaw(nu)
    y0 = {1: F(1, 2), 3: F(1, 2)}
    m = sum(k * v for k, v in law.probs.items())
    means = [mean_of(law_by_enumeration(nu, y0, F(2, 5), n)) for n in range(5)]
    for a, b in zip(means, means[1:]):
        assert m * a - 1 <= b <= m * a
