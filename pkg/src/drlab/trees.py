"""Monte Carlo on reversed Galton-Watson trees and the size-biased spine.

A reversed tree of depth n has its root at generation n; every vertex at
generation j >= 1 has nu_u parents at generation j - 1, drawn i.i.d. from the
offspring law.  Leaves sit at generation 0.  Parents of one vertex are stored
contiguously, so a forest of T independent trees is the same object as a
single tree whose top generation holds T roots.

Randomness is split into fixed-size tasks; task ``i`` of a run with seed
``seed`` draws from its own Philox stream keyed by ``(seed, i)``.  Results are
therefore independent of the number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product
from typing import Callable

import numpy as np
from scipy import stats

from .lattice import LatticeError, LatticePmf, ModelSpec, OffspringLaw, make_initial

DEFAULT_MAX_VERTICES = 20_000_000
DEFAULT_CHUNK = 2_000


class TreeBudgetError(RuntimeError):
    """Raised instead of silently subsampling when a tree would be too large."""


def task_rng(seed: int, task: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(task)])))


def run_tasks(fn: Callable[[np.random.Generator, int], object], trials: int, seed: int,
              chunk: int = DEFAULT_CHUNK, threads: int = 1) -> list:
    """Run ``fn(rng, count)`` over consecutive chunks of ``trials``; results in task order."""
    if trials < 0:
        raise ValueError("trials must be >= 0")
    sizes = [min(chunk, trials - i) for i in range(0, trials, chunk)]
    jobs = [(task_rng(seed, i), c) for i, c in enumerate(sizes)]
    if threads <= 1 or len(jobs) <= 1:
        return [fn(rng, c) for rng, c in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda j: fn(*j), jobs))


def _law_arrays(nu: OffspringLaw) -> tuple[np.ndarray, np.ndarray]:
    ks = np.array(list(nu.probs), dtype=np.int64)
    ps = np.array([float(v) for v in nu.probs.values()])
    return ks, ps / ps.sum()


def _draw(rng: np.random.Generator, values: np.ndarray, probs: np.ndarray, size: int) -> np.ndarray:
    if len(values) == 1:
        return np.full(size, values[0], dtype=np.int64)
    cdf = np.cumsum(probs)
    idx = np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right")
    return values[np.minimum(idx, len(values) - 1)]


# ---------------------------------------------------------------- trees

@dataclass
class GWTree:
    """Reversed GW forest; ``counts[j][v]`` is the number of parents of vertex v at generation j."""

    n: int
    counts: list[np.ndarray]
    sizes: list[int]

    @property
    def roots(self) -> int:
        return self.sizes[self.n]

    @property
    def leaves(self) -> int:
        return self.sizes[0]

    @property
    def vertices(self) -> int:
        return sum(self.sizes)

    def starts(self, j: int) -> np.ndarray:
        """Offsets of the parent groups of generation j inside generation j - 1."""
        c = self.counts[j]
        return np.concatenate(([0], np.cumsum(c)[:-1])).astype(np.int64)

    def child_of(self, j: int) -> np.ndarray:
        """Index in generation j + 1 of the child of each generation-j vertex."""
        c = self.counts[j + 1]
        return np.repeat(np.arange(len(c)), c)

    def reduce(self, ufunc: np.ufunc, values: np.ndarray, j: int) -> np.ndarray:
        """Apply ``ufunc`` over each parent group of generation j."""
        return ufunc.reduceat(values, self.starts(j))

    def leaf_counts(self) -> list[np.ndarray]:
        """#T_0(v) for every vertex, by generation."""
        out = [np.ones(self.sizes[0], dtype=np.int64)]
        for j in range(1, self.n + 1):
            out.append(self.reduce(np.add, out[-1], j))
        return out

    def tree_of_leaf(self) -> np.ndarray:
        idx = np.arange(self.sizes[0])
        for j in range(self.n):
            idx = self.child_of(j)[idx]
        return idx


def sample_forest(nu: OffspringLaw, n: int, trees: int, rng: np.random.Generator,
                  max_vertices: int = DEFAULT_MAX_VERTICES) -> GWTree:
    if n < 0:
        raise ValueError("n must be >= 0")
    ks, ps = _law_arrays(nu)
    counts: list[np.ndarray] = [np.zeros(0, dtype=np.int64)] * (n + 1)
    sizes = [0] * (n + 1)
    sizes[n] = trees
    total = trees
    for j in range(n, 0, -1):
        c = _draw(rng, ks, ps, sizes[j])
        counts[j] = c
        sizes[j - 1] = int(c.sum())
        total += sizes[j - 1]
        if total > max_vertices:
            raise TreeBudgetError(f"forest exceeds {max_vertices} vertices")
    return GWTree(n, counts, sizes)


def sample_gw_tree(nu: OffspringLaw, n: int, seed: int,
                   max_vertices: int = DEFAULT_MAX_VERTICES) -> GWTree:
    return sample_forest(nu, n, 1, task_rng(seed, 0), max_vertices)


def x0_sampler(source: ModelSpec | LatticePmf) -> Callable[[np.random.Generator, int], np.ndarray]:
    """Sampler for X0 (from a model) or for an integer-valued lattice law."""
    pmf = make_initial(source) if isinstance(source, ModelSpec) else source
    if pmf.step != 1:
        raise LatticeError("tree simulation needs integer-valued X0")
    pmf = pmf.to_float()
    values = np.arange(pmf.offset, pmf.offset + len(pmf.weights), dtype=np.int64)
    probs = np.asarray(pmf.weights, dtype=float)

    def draw(rng: np.random.Generator, size: int) -> np.ndarray:
        return _draw(rng, values, probs, size)

    return draw


def propagate(tree: GWTree, leaf_values: np.ndarray) -> list[np.ndarray]:
    """X(u) for every vertex given leaf values."""
    xs = [np.asarray(leaf_values, dtype=np.int64)]
    for j in range(1, tree.n + 1):
        xs.append(np.maximum(tree.reduce(np.add, xs[-1], j) - 1, 0))
    return xs


def evaluate_recursion_on_tree(tree: GWTree, sampler, seed: int) -> list[np.ndarray]:
    """Draw i.i.d. leaf values and evaluate the recursion up to the root(s)."""
    rng = task_rng(seed, 1)
    return propagate(tree, sampler(rng, tree.leaves))


def sample_root_values(spec: ModelSpec, n: int, trials: int, seed: int,
                       chunk: int = DEFAULT_CHUNK, threads: int = 1) -> np.ndarray:
    """Independent draws of X(e_n), one per tree."""
    draw = x0_sampler(spec)

    def task(rng, count):
        forest = sample_forest(spec.nu, n, count, rng)
        return propagate(forest, draw(rng, forest.leaves))[-1]

    return np.concatenate(run_tasks(task, trials, seed, chunk, threads) or [np.zeros(0, np.int64)])


def total_variation(samples: np.ndarray, pmf: LatticePmf) -> float:
    counts = np.bincount(samples) / len(samples)
    exact = {int(round(float(v))): float(w) for v, w in zip(pmf.values(), pmf.weights)}
    keys = set(range(len(counts))) | set(exact)
    return 0.5 * math.fsum(abs((counts[k] if k < len(counts) else 0.0) - exact.get(k, 0.0))
                                   for k in keys)


# ---------------------------------------------------------------- spine

def size_biased_law(nu: OffspringLaw) -> dict[int, Fraction | float]:
    """Law of #bro under Q: P(#bro = k - 1) = k P(nu = k) / m."""
    exact = all(isinstance(v, (int, Fraction)) for v in nu.probs.values())
    m = sum(k * (Fraction(v) if exact else v) for k, v in nu.probs.items())
    return {k - 1: k * (Fraction(v) if exact else v) / m for k, v in nu.probs.items()}


def gw_population(nu: OffspringLaw, start: np.ndarray, generations: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Population after ``generations`` steps of forward GW from ``start`` individuals."""
    ks, ps = _law_arrays(nu)
    z = np.asarray(start, dtype=np.int64).copy()
    for _ in range(generations):
        if len(ks) == 1:
            z = z * ks[0]
        else:
            z = rng.multinomial(z, ps) @ ks
    return z


@dataclass
class SpineSample:
    """Spine features for a batch of size-biased trees.

    ``bro[:, i]`` is #bro(e_i), ``lam[:, i]`` is Lambda(e_i) for i < n and
    ``sizes[:, i]`` is #T_0(e_i) for i <= n.
    """

    n: int
    bro: np.ndarray
    lam: np.ndarray

    @property
    def sizes(self) -> np.ndarray:
        cum = np.cumsum(self.lam, axis=1)
        return np.concatenate([np.ones((len(self.bro), 1), np.int64), 1 + cum], axis=1)

    @property
    def features(self) -> "PathFeatures":
        return PathFeatures(self.sizes, self.bro, self.lam)


def sample_spines(nu: OffspringLaw, n: int, count: int, rng: np.random.Generator) -> SpineSample:
    if n < 1:
        raise ValueError("spine needs n >= 1")
    law = size_biased_law(nu)
    vals = np.array(list(law), dtype=np.int64)
    probs = np.array([float(v) for v in law.values()])
    bro = np.stack([_draw(rng, vals, probs, count) for _ in range(n)], axis=1)
    lam = np.stack([gw_population(nu, bro[:, i], i, rng) for i in range(n)], axis=1)
    return SpineSample(n, bro, lam)


def sample_spine(nu: OffspringLaw, n: int, seed: int) -> SpineSample:
    return sample_spines(nu, n, 1, task_rng(seed, 0))


def brother_law_chisquare(nu: OffspringLaw, samples: int, seed: int) -> tuple[float, float]:
    """Chi-square statistic and p-value of #bro(e_0) against k P(nu=k)/m."""
    law = size_biased_law(nu)
    draws = np.concatenate(run_tasks(lambda rng, c: sample_spines(nu, 1, c, rng).bro[:, 0],
                                     samples, seed, chunk=50_000))
    keys = sorted(law)
    observed = np.array([(draws == k).sum() for k in keys], dtype=float)
    expected = np.array([float(law[k]) * samples for k in keys])
    if len(keys) == 1:
        return 0.0, 1.0 if observed[0] == samples else 0.0
    res = stats.chisquare(observed, expected)
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------- many-to-one

@dataclass
class PathFeatures:
    """Features along the path u_0 (leaf), ..., u_n (root), one row per path."""

    sizes: np.ndarray  # #T_0(u_i), i = 0..n
    bro: np.ndarray    # #bro(u_i), i = 0..n-1
    lam: np.ndarray    # Lambda(u_i), i = 0..n-1


def leaf_paths(tree: GWTree) -> tuple[PathFeatures, np.ndarray]:
    """Path features of every leaf plus the index of its tree."""
    counts = tree.leaf_counts()
    anc = [np.arange(tree.leaves)]
    for j in range(tree.n):
        anc.append(tree.child_of(j)[anc[-1]])
    sizes = np.stack([counts[i][anc[i]] for i in range(tree.n + 1)], axis=1)
    bro = np.stack([tree.counts[i + 1][anc[i + 1]] - 1 for i in range(tree.n)], axis=1) \
        if tree.n else np.zeros((tree.leaves, 0), np.int64)
    lam = sizes[:, 1:] - sizes[:, :-1]
    return PathFeatures(sizes, bro, lam), anc[-1]


@dataclass(frozen=True)
class ManyToOne:
    lhs: float
    rhs: float
    lhs_se: float
    rhs_se: float

    @property
    def z_score(self) -> float:
        se = math.hypot(self.lhs_se, self.rhs_se)
        return 0.0 if se == 0 else abs(self.lhs - self.rhs) / se

    def agrees(self, sigmas: float = 3.0) -> bool:
        se = math.hypot(self.lhs_se, self.rhs_se)
        return abs(self.lhs - self.rhs) <= sigmas * se + 1e-12 * max(1.0, abs(self.rhs))


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    if len(x) < 2:
        return float(x.mean()) if len(x) else 0.0, 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))


def many_to_one_check(g: Callable[[PathFeatures], np.ndarray], nu: OffspringLaw, n: int,
                      trials: int, seed: int, chunk: int = DEFAULT_CHUNK,
                      threads: int = 1) -> ManyToOne:
    """Monte Carlo E[sum over leaves of g] against m**n E_Q[g(spine)]."""

    def lhs_task(rng, count):
        forest = sample_forest(nu, n, count, rng)
        feats, tree_id = leaf_paths(forest)
        return np.bincount(tree_id, weights=np.asarray(g(feats), float), minlength=count)

    def rhs_task(rng, count):
        return np.asarray(g(sample_spines(nu, n, count, rng).features), float)

    left = np.concatenate(run_tasks(lhs_task, trials, seed, chunk, threads))
    right = np.concatenate(run_tasks(rhs_task, trials, seed + 1, chunk, threads))
    scale = nu.mean ** n
    l_mean, l_se = _mean_se(left)
    r_mean, r_se = _mean_se(right)
    return ManyToOne(l_mean, scale * r_mean, l_se, scale * r_se)


def _enumerate_trees(probs: dict, depth: int) -> list[tuple[Fraction, tuple]]:
    """All reversed trees of a given depth as (probability, nested tuple of subtrees)."""
    if depth == 0:
        return [(Fraction(1), ())]
    sub = _enumerate_trees(probs, depth - 1)
    out = []
    for k, pk in probs.items():
        for combo in product(sub, repeat=k):
            w = Fraction(pk)
            for cw, _ in combo:
                w *= cw
            out.append((w, tuple(t for _, t in combo)))
    return out


def _tree_leaf_paths(tree: tuple, depth: int) -> list[tuple[list[int], list[int], list[int]]]:
    """(sizes, bro, lam) for every leaf of a nested-tuple tree, sizes from leaf to root."""
    def leaves(t):
        return 1 if not t else sum(leaves(c) for c in t)

    if depth == 0:
        return [([1], [], [])]
    total = leaves(tree)
    out = []
    for child in tree:
        for sizes, bro, lam in _tree_leaf_paths(child, depth - 1):
            out.append((sizes + [total], bro + [len(tree) - 1], lam + [total - sizes[-1]]))
    return out


def _population_law(probs: dict, generations: int) -> dict[int, Fraction]:
    law = {1: Fraction(1)}
    for _ in range(generations):
        new: dict[int, Fraction] = {}
        for z, pz in law.items():
            for combo in product(probs.items(), repeat=z):
                total = sum(k for k, _ in combo)
                w = pz
                for _, pk in combo:
                    w *= Fraction(pk)
                new[total] = new.get(total, 0) + w
        law = new
    return law


def _sum_law(base: dict[int, Fraction], copies: int) -> dict[int, Fraction]:
    law = {0: Fraction(1)}
    for _ in range(copies):
        new: dict[int, Fraction] = {}
        for a, pa in law.items():
            for b, pb in base.items():
                new[a + b] = new.get(a + b, 0) + pa * pb
        law = new
    return law


def _features_value(g, rows: list[tuple[list[int], list[int], list[int]]]) -> list[Fraction]:
    n = len(rows[0][1])
    sizes = np.array([r[0] for r in rows], dtype=np.int64).reshape(len(rows), n + 1)
    bro = np.array([r[1] for r in rows], dtype=np.int64).reshape(len(rows), n)
    lam = np.array([r[2] for r in rows], dtype=np.int64).reshape(len(rows), n)
    return [Fraction(float(v)) for v in np.asarray(g(PathFeatures(sizes, bro, lam)), float)]


def enumerate_many_to_one(g: Callable[[PathFeatures], np.ndarray], nu: OffspringLaw,
                          n: int) -> tuple[Fraction, Fraction]:
    """Exact E[sum over leaves of g] by tree enumeration and m**n E_Q[g] by spine enumeration.

    Exponential in n; meant for n <= 3 and small offspring support.
    """
    probs = {k: Fraction(v) for k, v in nu.probs.items()}
    lhs = Fraction(0)
    for w, tree in _enumerate_trees(probs, n):
        rows = _tree_leaf_paths(tree, n)
        lhs += w * sum(_features_value(g, rows))

    bro_law = size_biased_law(OffspringLaw(probs))
    per_level = []
    for i in range(n):
        pop = _population_law(probs, i)
        joint = {}
        for b, pb in bro_law.items():
            for lam, pl in _sum_law(pop, b).items():
                joint[(b, lam)] = joint.get((b, lam), 0) + pb * pl
        per_level.append(list(joint.items()))
    rhs = Fraction(0)
    for combo in product(*per_level):
        w = Fraction(1)
        bro, lam = [], []
        for (b, l), pw in combo:
            w *= pw
            bro.append(b)
            lam.append(l)
        sizes = [1]
        for l in lam:
            sizes.append(sizes[-1] + l)
        rhs += w * _features_value(g, [(sizes, bro, lam)])[0]
    m = sum(k * p for k, p in probs.items())
    return lhs, m**n * rhs


# ---------------------------------------------------------------- moments

def c10(nu: OffspringLaw) -> float:
    return nu.factorial_moment2() / nu.mean


@dataclass
class SpineMoments:
    first: np.ndarray
    first_se: np.ndarray
    second: np.ndarray
    closed_form: np.ndarray
    c12: float

    def first_within(self, sigmas: float = 3.0) -> bool:
        return bool(np.all(np.abs(self.first - self.closed_form)
                           <= sigmas * self.first_se + 1e-9 * self.closed_form))


def spine_subtree_moments(nu: OffspringLaw, n: int, trials: int, seed: int,
                          threads: int = 1) -> SpineMoments:
    """E_Q[#T_0(e_i)] and E_Q[#T_0(e_i)**2] for i = 0..n, with the closed form of the first."""
    sizes = np.concatenate(run_tasks(lambda rng, c: sample_spines(nu, n, c, rng).sizes,
                                     trials, seed, threads=threads)).astype(float)
    first = sizes.mean(axis=0)
    se = sizes.std(axis=0, ddof=1) / math.sqrt(len(sizes)) if len(sizes) > 1 else np.zeros(n + 1)
    second = (sizes**2).mean(axis=0)
    m = nu.mean
    closed = np.array([c10(nu) * sum(m**j for j in range(i)) + 1 for i in range(n + 1)])
    c12 = float(np.max(second / m ** (2 * np.arange(n + 1))))
    return SpineMoments(first, se, second, closed, c12)


# ---------------------------------------------------------------- Z statistic

@dataclass(frozen=True)
class ZConfig:
    n: int
    b: int
    lambda1: float = 1 / 3
    lambda2: float = 2 / 3

    def __post_init__(self):
        if not 0 < self.lambda1 < self.lambda2 < 1:
            raise ValueError("need 0 < lambda1 < lambda2 < 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")

    @property
    def j1(self) -> int:
        return math.floor(self.lambda1 * self.n)

    @property
    def j2(self) -> int:
        return math.floor(self.lambda2 * self.n)


def _sibling_max(tree: GWTree, values: np.ndarray, j: int) -> np.ndarray:
    """For each generation-j vertex, the max of ``values`` over its brothers (-1 if none)."""
    starts = tree.starts(j + 1)
    group = tree.child_of(j)
    top1 = np.maximum.reduceat(values, starts)
    is_top = values == top1[group]
    n_top = np.add.reduceat(is_top.astype(np.int64), starts)
    top2 = np.maximum.reduceat(np.where(is_top, -1, values), starts)
    return np.where(~is_top | (n_top[group] >= 2), top1[group], top2[group])


def z_counts(tree: GWTree, xs: list[np.ndarray], cfg: ZConfig, b: int | None = None) -> np.ndarray:
    """Z for every tree of the forest."""
    n = tree.n
    b = cfg.b if b is None else b
    j1, j2 = cfg.j1, cfg.j2
    leaf_max = [xs[0]]
    for j in range(1, n + 1):
        leaf_max.append(tree.reduce(np.maximum, leaf_max[-1], j))
    # running max of M(u_j) over j = 1..j1, carried from generation j1 down to 1
    run = None
    for j in range(min(j1, n - 1), 0, -1):
        mj = np.maximum(_sibling_max(tree, leaf_max[j], j) - j, 0)
        run = mj if run is None else np.maximum(mj, run[tree.child_of(j)])
    x = xs[0]
    if run is None:
        best = np.zeros(tree.leaves, dtype=np.int64)
    else:
        best = run[tree.child_of(0)]
    hit = (x >= j1) & (x <= j2) & (best >= b + n - x)
    tree_id = tree.tree_of_leaf()
    return np.bincount(tree_id, weights=hit, minlength=tree.roots).astype(np.int64)


@dataclass(frozen=True)
class ZResult:
    p_hat: float
    se: float
    p_exact: float
    trials: int
    pathwise_violations: int

    def holds(self, sigmas: float = 3.0) -> bool:
        return self.p_hat <= self.p_exact + sigmas * self.se + 1e-12


def z_statistic(spec: ModelSpec, cfg: ZConfig, trials: int, seed: int,
                chunk: int = 500, threads: int = 1) -> ZResult:
    """Monte Carlo P(Z >= 1) against the exact P(X_n >= b) from the lattice engine.

    Also counts trees where Z >= 1 but X(e_n) < b, which the event A_u rules out.
    """
    from .engine import iterate
    from .lattice import tail

    draw = x0_sampler(spec)

    def task(rng, count):
        forest = sample_forest(spec.nu, cfg.n, count, rng)
        xs = propagate(forest, draw(rng, forest.leaves))
        z = z_counts(forest, xs, cfg)
        return np.stack([z >= 1, (z >= 1) & (xs[-1] < cfg.b)])

    res = np.concatenate(run_tasks(task, trials, seed, chunk, threads), axis=1)
    hit = res[0].astype(float)
    p_hat, se = _mean_se(hit)
    if p_hat in (0.0, 1.0):
        se = 1.0 / trials  # conservative floor when no variation is observed
    trace = iterate(spec, cfg.n, None, keep_pmfs=True)
    p_exact = float(tail(trace.pmfs[cfg.n], cfg.b))
    return ZResult(p_hat, se, p_exact, trials, int(res[1].sum()))


# ---------------------------------------------------------------- leaf maximum

def sample_max_leaf(spec: ModelSpec, n: int, trials: int, seed: int,
                    chunk: int = DEFAULT_CHUNK, threads: int = 1) -> np.ndarray:
    """max over leaves of X(u), one value per tree."""
    draw = x0_sampler(spec)

    def task(rng, count):
        forest = sample_forest(spec.nu, n, count, rng)
        lm = draw(rng, forest.leaves)
        for j in range(1, n + 1):
            lm = forest.reduce(np.maximum, lm, j)
        return lm

    return np.concatenate(run_tasks(task, trials, seed, chunk, threads))


# ---------------------------------------------------------------- W martingale

@dataclass
class MartingaleReport:
    means: np.ndarray
    se: np.ndarray
    variances: np.ndarray
    exact_var: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def means_within(self, sigmas: float = 3.0) -> bool:
        return bool(np.all(np.abs(self.means - 1) <= sigmas * self.se + 1e-12))


def martingale_w_check(nu: OffspringLaw, depth: int, trials: int, seed: int,
                       threads: int = 1) -> MartingaleReport:
    """W_j = Z_j / m**j for j = 0..depth, from forward GW populations."""
    m = nu.mean

    def task(rng, count):
        z = np.ones(count, dtype=np.int64)
        rows = [z.copy()]
        for _ in range(depth):
            z = gw_population(nu, z, 1, rng)
            rows.append(z)
        return np.stack(rows, axis=1)

    zs = np.concatenate(run_tasks(task, trials, seed, threads=threads)).astype(float)
    w = zs / m ** np.arange(depth + 1)
    means = w.mean(axis=0)
    var = w.var(axis=0, ddof=1) if len(w) > 1 else np.zeros(depth + 1)
    se = np.sqrt(var / len(w))
    # Var(W_j) = sigma^2 / (m (m - 1)) * (1 - m**-j)
    sigma2 = nu.factorial_moment2() + m - m**2
    exact = np.array([sigma2 / (m * (m - 1)) * (1 - m ** (-j)) for j in range(depth + 1)])
    return MartingaleReport(means, se, var, exact)
