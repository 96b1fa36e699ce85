"""Command-line entry point: ``drlab <subcommand> --config run.json``.

Config document::

    {"model": {"nu": {"2": 1},
               "y0": {"2": 1}            # or "family": {"kind", "theta"|"alpha", "m", "k_max"}
               "p": 0.2},                # or "p_grid": [...]
     "run": {"n_max": 30, "tol": 1e-6, "budget": 1e-30, ...}}

Probabilities may be numbers or strings such as "1/3"; strings switch the
model to exact rational arithmetic where the operation supports it.

Exit codes: 0 success, 2 invalid input, 3 undecided or not established.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from fractions import Fraction

import numpy as np

from . import __version__
from .criticality import Bracket, BracketError, pc_bisect, pc_theorem_a
from .engine import TRACE_COLUMNS, free_energy, iterate
from .experiments import (
    CRITICAL,
    EXPONENTIAL,
    FitError,
    choose_k_max,
    conjecture_scan,
    fit_beta,
    fit_chi,
    make_tail_family,
    max_leaf_lower_bound_check,
)
from .gf import (
    GF_BOUND_COLUMNS,
    gf_trace,
    upper_bound_critical,
    upper_bound_power_law,
    verify_contraction,
)
from .lattice import LatticeError, LatticePmf, ModelSpec, OffspringLaw

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_UNDECIDED = 0, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}:1:1: top level must be a JSON object")
    return doc


def _prob(v):
    if isinstance(v, str):
        try:
            return Fraction(v)
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"bad probability {v!r}") from None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"bad probability {v!r}")
    return v


def _law(d, what: str) -> dict:
    if not isinstance(d, dict) or not d:
        raise ConfigError(f"model.{what} must be a non-empty object of value -> probability")
    try:
        return {int(k): _prob(v) for k, v in d.items()}
    except ValueError as exc:
        raise ConfigError(f"model.{what}: {exc}") from None


def _family(model: dict, nu: OffspringLaw, p_min: float | None):
    fam = model["family"]
    if not isinstance(fam, dict) or fam.get("kind") not in (EXPONENTIAL, CRITICAL):
        raise ConfigError("model.family.kind must be 'exponential' or 'critical'")
    key = "theta" if fam["kind"] == EXPONENTIAL else "alpha"
    if key not in fam:
        raise ConfigError(f"model.family needs {key!r}")
    m = float(fam.get("m", nu.mean))
    if abs(m - nu.mean) > 1e-12:
        raise ConfigError(f"model.family.m = {m} disagrees with the mean of nu ({nu.mean})")
    k_max = fam.get("k_max")
    if k_max is None:
        k_max = choose_k_max(fam["kind"], float(fam[key]), m, p_min or 1e-3, nu)
    return make_tail_family(fam["kind"], float(fam[key]), m, int(k_max))


def _nu(model: dict) -> OffspringLaw:
    if "nu" not in model:
        if "family" in model and "m" in model["family"]:
            m = float(model["family"]["m"])
            if m.is_integer():
                return OffspringLaw.deterministic(int(m))
        raise ConfigError("model.nu is required")
    return OffspringLaw(_law(model["nu"], "nu"))


def p_values(cfg: dict) -> list:
    model = cfg.get("model", {})
    if "p_grid" in model:
        grid = model["p_grid"]
        if not isinstance(grid, list) or not grid:
            raise ConfigError("model.p_grid must be a non-empty list")
        return [_prob(p) for p in grid]
    if "p" in model:
        return [_prob(model["p"])]
    return []


def build_specs(cfg: dict) -> list[ModelSpec]:
    """One model per p value (model.p or model.p_grid)."""
    model = cfg.get("model")
    if not isinstance(model, dict):
        raise ConfigError("config needs a 'model' object")
    nu = _nu(model)
    ps = p_values(cfg) or [1]
    if "family" in model:
        fam = _family(model, nu, min(float(p) for p in ps))
        return [fam.spec(nu, p) for p in ps]
    if "y0" not in model:
        raise ConfigError("model needs 'y0' or 'family'")
    y0 = _law(model["y0"], "y0")
    exact = all(isinstance(v, (int, Fraction)) for v in y0.values()) and \
        all(isinstance(p, (int, Fraction)) for p in ps) and \
        any(isinstance(v, Fraction) for v in list(y0.values()) + ps)
    pmf = LatticePmf.from_masses(y0, exact=exact)
    return [ModelSpec(nu, pmf, p) for p in ps]


def run_opt(cfg: dict, key: str, default):
    return cfg.get("run", {}).get(key, default)


# ---------------------------------------------------------------- output

def _jsonable(x):
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x)}")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.bool_):
        return str(bool(v))
    return str(v)


def render(command: str, fmt: str, columns: list[str], rows: list[list], result: dict) -> str:
    if fmt == "json":
        doc = {"schema_version": SCHEMA_VERSION, "command": command, "version": __version__,
               "result": result}
        return json.dumps(doc, sort_keys=True, indent=2, default=_jsonable) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------- commands

def cmd_iterate(cfg, args):
    spec = build_specs(cfg)[0]
    n_max = int(run_opt(cfg, "n_max", 20))
    budget = run_opt(cfg, "budget", 1e-30)
    trace = iterate(spec, n_max, budget)
    rows = []
    for g in trace.generations:
        lo, hi = trace.sandwich_raw(g.n)
        rows.append([g.n, g.mean_low, g.mean_high, g.zero_mass, g.support_size, g.dropped, lo, hi])
    result = {"stopped": trace.stopped, "rows": [dict(zip(TRACE_COLUMNS, r)) for r in rows]}
    return TRACE_COLUMNS, rows, result, EXIT_OK


def cmd_free_energy(cfg, args):
    tol = float(run_opt(cfg, "tol", 1e-6))
    n_cap = int(run_opt(cfg, "n_max", 200))
    relative = bool(run_opt(cfg, "relative", False))
    cols = ["p", "F_low", "F_high", "n_used", "tolerance_reached", "stop_reason"]
    rows, ok = [], True
    for spec in build_specs(cfg):
        fe = free_energy(spec, tol, n_cap, relative=relative, budget=run_opt(cfg, "budget", None))
        rows.append([float(spec.p), fe.low, fe.high, fe.n_used, fe.reached, fe.stop_reason])
        ok &= fe.reached
    result = {"rows": [dict(zip(cols, r)) for r in rows]}
    return cols, rows, result, EXIT_OK if ok else EXIT_UNDECIDED


def cmd_pc_bisect(cfg, args):
    base = build_specs(cfg)[0]
    tol = float(run_opt(cfg, "tol", 1e-3))
    p_lo = float(run_opt(cfg, "p_lo", 1e-3))
    p_hi = float(run_opt(cfg, "p_hi", 0.9))
    n_max = int(run_opt(cfg, "n_max", 2000))
    br: Bracket = pc_bisect(base.with_p, p_lo, p_hi, tol=tol, n_max=n_max)
    result = br.to_dict()
    if base.nu.is_deterministic and base.y0.step == 1:
        result["theorem_a"] = float(pc_theorem_a(base.y0, base.nu))
    cols = ["p_low", "p_high", "width", "complete", "theorem_a"]
    rows = [[br.low, br.high, br.high - br.low, br.complete, result.get("theorem_a", "")]]
    return cols, rows, result, EXIT_OK if br.complete else EXIT_UNDECIDED


def cmd_gf_bound(cfg, args):
    specs = build_specs(cfg)
    if "s" in cfg.get("run", {}):
        s = float(run_opt(cfg, "s", 1.5))
        n_max = int(run_opt(cfg, "n_max", 20))
        delta0 = float(run_opt(cfg, "delta0", 1.0))
        spec = specs[0]
        trace = gf_trace(spec, s, n_max, run_opt(cfg, "budget", None))
        rep = verify_contraction(trace, delta0)
        cols = ["n", "s", "G", "G_prime", "a", "zero"]
        rows = [[pt.n, pt.s, pt.G, pt.G_prime, pt.a, pt.zero] for pt in trace.points]
        result = {"contraction": rep.to_dict(), "cross_check_consistent": trace.consistent,
                  "truncated": trace.truncated, "rows": [dict(zip(cols, r)) for r in rows]}
        return cols, rows, result, EXIT_OK if rep.holds else EXIT_UNDECIDED
    kind = (specs[0].family or {}).get("kind")
    if kind is None:
        raise ConfigError("gf-bound needs model.family, or run.s for a trace")
    const = run_opt(cfg, "c7" if kind == CRITICAL else "c9", None)
    bounds = []
    for spec in specs:
        if kind == CRITICAL:
            bounds.append(upper_bound_critical(spec, c7=const))
        else:
            bounds.append(upper_bound_power_law(spec, c9=const))
    rows = [b.row() for b in bounds]
    result = {"rows": [dict(zip(GF_BOUND_COLUMNS + ["constant"], b.row() + [b.constant]))
                       for b in bounds]}
    ok = all(b.established for b in bounds)
    return GF_BOUND_COLUMNS, rows, result, EXIT_OK if ok else EXIT_UNDECIDED


def cmd_tree_check(cfg, args):
    from . import trees

    spec = build_specs(cfg)[0]
    nu = spec.nu
    n = int(run_opt(cfg, "n", 6))
    trials = int(run_opt(cfg, "trials", 20_000))
    seed, threads = args.seed, args.threads
    rows = []

    stat, pval = trees.brother_law_chisquare(nu, trials, seed)
    rows.append(["spine_law_chi2", stat, pval, 0.0, pval > 1e-3])

    mto = trees.many_to_one_check(lambda f: f.sizes[:, min(1, n)].astype(float), nu, n,
                                  trials, seed + 1, threads=threads)
    rows.append(["many_to_one_sizes", mto.lhs, mto.rhs, math.hypot(mto.lhs_se, mto.rhs_se),
                 mto.agrees()])

    if spec.y0.step == 1:
        samples = trees.sample_root_values(spec, n, trials, seed + 2, threads=threads)
        exact = iterate(spec, n, None, keep_pmfs=True).pmfs[n]
        tv = trees.total_variation(samples, exact)
        tv_limit = 3 * math.sqrt(max(exact.support_size, 1) / trials)
        rows.append(["root_law_tv", tv, 0.0, tv_limit, tv <= tv_limit])
        for r in max_leaf_lower_bound_check(spec, n, run_opt(cfg, "b_grid", [0, 1, 2]), trials,
                                            seed + 3, threads):
            rows.append([f"max_leaf_b{r.b}", r.p_exact, r.p_hat, r.se, r.holds])
        for b in run_opt(cfg, "z_b", [1, 2, 3]):
            cfg_z = trees.ZConfig(n, int(b))
            z = trees.z_statistic(spec, cfg_z, trials, seed + 4, threads=threads)
            rows.append([f"z_b{b}", z.p_exact, z.p_hat, z.se,
                         z.holds() and z.pathwise_violations == 0])
    cols = ["check", "value", "reference", "sigma", "passed"]
    result = {"rows": [dict(zip(cols, r)) for r in rows]}
    ok = all(r[-1] for r in rows)
    return cols, rows, result, EXIT_OK if ok else EXIT_UNDECIDED


def _fit_rows(rep):
    cols = ["p", "F_low", "F_high", "admissible"]
    rows = [[p, lo, hi, ok] for p, lo, hi, ok in zip(rep.p, rep.F_low, rep.F_high, rep.admissible)]
    return cols, rows


def _family_cfg(cfg, kind):
    fam = cfg.get("model", {}).get("family")
    if not isinstance(fam, dict) or fam.get("kind") != kind:
        raise ConfigError(f"model.family with kind {kind!r} is required")
    return fam


def _grid(cfg, default):
    ps = p_values(cfg)
    return [float(p) for p in ps] if ps else default


def cmd_fit_beta(cfg, args):
    from .experiments import BETA_GRID
    fam = _family_cfg(cfg, EXPONENTIAL)
    if "theta" not in fam:
        raise ConfigError("model.family needs 'theta'")
    m = float(fam.get("m", 2))
    nu = OffspringLaw(_law(cfg["model"]["nu"], "nu")) if "nu" in cfg["model"] else None
    rep = fit_beta(float(fam["theta"]), m, _grid(cfg, BETA_GRID),
                   float(run_opt(cfg, "tol", 0.05)), float(run_opt(cfg, "band", 0.3)), nu)
    cols, rows = _fit_rows(rep)
    return cols, rows, rep.to_dict(), EXIT_OK if rep.passed else EXIT_UNDECIDED


def cmd_fit_chi(cfg, args):
    from .experiments import CHI_GRID
    fam = _family_cfg(cfg, CRITICAL)
    if "alpha" not in fam:
        raise ConfigError("model.family needs 'alpha'")
    m = float(fam.get("m", 2))
    nu = OffspringLaw(_law(cfg["model"]["nu"], "nu")) if "nu" in cfg["model"] else None
    rep = fit_chi(float(fam["alpha"]), m, _grid(cfg, CHI_GRID),
                  float(run_opt(cfg, "tol", 0.05)), float(run_opt(cfg, "band", 0.2)), nu)
    cols, rows = _fit_rows(rep)
    return cols, rows, rep.to_dict(), EXIT_OK if rep.passed else EXIT_UNDECIDED


def cmd_conjecture_scan(cfg, args):
    spec = build_specs(cfg)[0]
    p_c = run_opt(cfg, "p_c", None)
    rep = conjecture_scan(spec, float(run_opt(cfg, "p_lo", 0.25)), float(run_opt(cfg, "p_hi", 0.45)),
                          int(run_opt(cfg, "points", 9)), None if p_c is None else float(p_c),
                          float(run_opt(cfg, "tol", 1e-3)))
    cols = ["p", "F_low", "F_high", "certified"]
    rows = [[p, lo, hi, c] for p, lo, hi, c in zip(rep.p, rep.F_low, rep.F_high, rep.certified)]
    return cols, rows, rep.to_dict(), EXIT_OK


COMMANDS = {
    "iterate": (cmd_iterate, "iterate the recursion and print the per-generation trace"),
    "free-energy": (cmd_free_energy, "certified interval for the free energy"),
    "pc-bisect": (cmd_pc_bisect, "bracket the critical p with certificates"),
    "gf-bound": (cmd_gf_bound, "generating-function trace or free-energy upper bound"),
    "tree-check": (cmd_tree_check, "Monte Carlo checks on reversed Galton-Watson trees"),
    "fit-beta": (cmd_fit_beta, "exponent fit for the exponential tail family"),
    "fit-chi": (cmd_fit_chi, "exponent fit for the critical tail family"),
    "conjecture-scan": (cmd_conjecture_scan, "exploratory scan just above the critical p"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drlab", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output path (default stdout)")
        sp.add_argument("--format", choices=["csv", "json"], default="csv")
        sp.add_argument("--threads", type=int, default=1)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed < 0 or args.seed >= 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INVALID
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    fn = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config)
        cols, rows, result, code = fn(cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FitError, BracketError) as exc:
        print(f"undecided: {exc}", file=sys.stderr)
        return EXIT_UNDECIDED
    except (LatticeError, ValueError, KeyError, TypeError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    text = render(args.command, args.format, cols, rows, result)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
