"""Independent brute-force references, written without numpy or the library's arithmetic.

Laws are plain ``dict[int, Fraction]``.  ``law_by_enumeration`` lists every
pair of values when adding one more i.i.d. input, so the law of a k-fold sum is
built from k - 1 exhaustive pair listings.  ``law_by_trees`` goes further and
enumerates whole reversed trees with every leaf assignment; it is exponential
and only meant for depth <= 2.
"""

from __future__ import annotations

from fractions import Fraction
from itertools import product


def initial_law(y0: dict, p) -> dict[int, Fraction]:
    p = Fraction(p)
    law = {0: 1 - p} if p != 1 else {}
    for k, v in y0.items():
        law[k] = law.get(k, Fraction(0)) + p * Fraction(v)
    return {k: v for k, v in law.items() if v != 0}


def _add(a: dict, b: dict) -> dict[int, Fraction]:
    out: dict[int, Fraction] = {}
    for x, px in a.items():
        for y, py in b.items():
            out[x + y] = out.get(x + y, Fraction(0)) + px * py
    return out


def _step(law: dict, nu: dict) -> dict[int, Fraction]:
    out: dict[int, Fraction] = {}
    partial = {0: Fraction(1)}
    for k in range(1, max(nu) + 1):
        partial = _add(partial, law)
        if k in nu:
            for s, w in partial.items():
                v = max(s - 1, 0)
                out[v] = out.get(v, Fraction(0)) + Fraction(nu[k]) * w
    return out


def law_by_enumeration(nu: dict, y0: dict, p, n: int) -> dict[int, Fraction]:
    """Law of X_n by exhaustive pair listings at every generation."""
    law = initial_law(y0, p)
    for _ in range(n):
        law = _step(law, {k: Fraction(v) for k, v in nu.items()})
    return law


def _trees(nu: dict, depth: int):
    if depth == 0:
        yield Fraction(1), None
        return
    for k, pk in nu.items():
        for combo in product(list(_trees(nu, depth - 1)), repeat=k):
            w = Fraction(pk)
            for cw, _ in combo:
                w *= cw
            yield w, tuple(t for _, t in combo)


def _leaves(tree) -> int:
    return 1 if tree is None else sum(_leaves(c) for c in tree)


def _evaluate(tree, values):
    """Value at the root given an iterator over leaf values."""
    if tree is None:
        return next(values)
    return max(sum(_evaluate(c, values) for c in tree) - 1, 0)


def law_by_trees(nu: dict, y0: dict, p, n: int) -> dict[int, Fraction]:
    """Law of X_n by enumerating reversed trees and every assignment of leaf values."""
    x0 = list(initial_law(y0, p).items())
    out: dict[int, Fraction] = {}
    for w, tree in _trees({k: Fraction(v) for k, v in nu.items()}, n):
        for assignment in product(x0, repeat=_leaves(tree)):
            weight = w
            for _, q in assignment:
                weight *= q
            value = _evaluate(tree, iter(x for x, _ in assignment))
            out[value] = out.get(value, Fraction(0)) + weight
    return out


def mean_of(law: dict) -> Fraction:
    return sum(k * v for k, v in law.items())


def theorem_a_pc(y0: dict, m: int) -> Fraction:
    total = sum(((m - 1) * k - 1) * Fraction(m) ** k * Fraction(v) for k, v in y0.items())
    return 1 / (max(total, Fraction(0)) + 1)
