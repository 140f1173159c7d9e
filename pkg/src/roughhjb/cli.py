"""Command-line entry point: ``roughhjb {lift,qv,verify,ito-check}``.

Exit codes: 0 all gates pass, 1 a gate failed, 2 usage or parse error,
3 numeric divergence.

Config files hold ``key = value`` lines (``#`` comments, no sections); keys are
long flag names with dashes or underscores. Explicit flags override the file.
"""
from __future__ import annotations

import argparse
import configparser
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import report as rpt
from .errors import DivergenceError, InvalidArgument

EXIT_PASS, EXIT_GATE, EXIT_USAGE, EXIT_DIVERGENCE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------------ lift

def cmd_lift(a) -> tuple[dict, list, object]:
    from .grid_paths import make_uniform_grid, read_path_csv
    from .roughpath import (brownian_rough_path, chen_defect_idx, ito_lift, levy_holder)
    from .grid_paths import holder_quotient

    if a.input:
        rp = ito_lift(read_path_csv(a.input), a.oversample, a.alpha)
        source = {"input": str(a.input)}
    else:
        if a.brownian is None:
            raise UsageError("lift needs --input or --brownian D")
        grid = make_uniform_grid(a.T, a.n)
        rp = brownian_rough_path(grid, a.brownian, a.seed, a.oversample, alpha=a.alpha)
        source = {"brownian": a.brownian}
    N = rp.grid.N
    X = rp.base.values
    if N <= 64:
        j, l, k = np.meshgrid(*(np.arange(N + 1),) * 3, indexing="ij")
        keep = (j <= l) & (l <= k)
        j, l, k = j[keep], l[keep], k[keep]
        mode = "exhaustive"
    else:
        rng = np.random.default_rng([a.seed, 0x43484e])
        tri = np.sort(rng.integers(0, N + 1, size=(a.triples, 3)), axis=1)
        j, l, k = tri.T
        mode = f"random({a.triples})"
    defect = float(np.abs(chen_defect_idx(rp, j, l, k)).max())
    sup = float(np.abs(X - X[0]).max())
    bound = 1e-12 * (1 + sup ** 2)
    results = {
        **source, "N": N, "d": rp.d, "T": float(rp.grid.T), "lift_rule": rp.lift_rule,
        "chen_mode": mode, "max_chen_defect": defect, "chen_bound": bound,
        "holder_X": holder_quotient(X, rp.times, rp.alpha)[0],
        "holder_XX": levy_holder(rp),
        "rough_path": {"grid": rp.times, "base": X, "levy": rp.levy, "alpha": rp.alpha},
    }
    gates = [rpt.gate("chen_defect", defect, bound, defect <= bound, mode)]
    return results, gates, rp


# -------------------------------------------------------------------------- qv

def cmd_qv(a) -> tuple[dict, list, object]:
    from .grid_paths import dyadic_partitions
    from .quadvar import cross_qv_stats
    from .timechange import parse_timechange

    tc = parse_timechange(a.tau, a.T)
    ps = dyadic_partitions(a.T, a.levels)
    seeds = range(a.seed, a.seed + a.seeds)
    stats = cross_qv_stats(seeds, tc, ps, a.T, d=1)
    lv = stats["levels"]
    top = lv[-1]
    gates = []
    if tc.kind == "identity":
        gates.append(rpt.gate("cross_equals_diag", top["cross_equals_diag"], True, top["cross_equals_diag"]))
    else:
        m, se = top["cross_mean"][-1], top["cross_stderr"][-1]
        gates.append(rpt.gate("cross_mean_T", m, 3 * se, abs(m) <= 3 * se + 1e-15, "|mean| <= 3 stderr"))
        if len(lv) > 1:
            ref = lv[max(0, len(lv) - 5)]
            gates.append(rpt.gate("cross_rms_decay", [ref["cross_rms"][-1], top["cross_rms"][-1]],
                                  f"level {top['level']} < level {ref['level']}",
                                  top["cross_rms"][-1] < ref["cross_rms"][-1]))
    q95 = top["W_abs_err_q95_T"] / a.T
    gates.append(rpt.gate("W_qv_q95", q95, a.qv_tol, q95 < a.qv_tol, "relative |[W](T) - T|, 95% quantile"))
    target = top["Wtau_target"][-1]
    got = top["Wtau_mean"][-1]
    rel = abs(got - target) / target if target > 0 else abs(got)
    gates.append(rpt.gate("Wtau_qv_mean", rel, a.qv_tol, rel < a.qv_tol, "relative, mean over seeds"))
    summary = [{"level": s["level"], "cross_rms_T": s["cross_rms"][-1], "cross_mean_T": s["cross_mean"][-1],
                "W_q95_T": s["W_abs_err_q95_T"], "Wtau_mean_T": s["Wtau_mean"][-1]} for s in lv]
    results = {"tau": a.tau, "samples": stats["samples"], "grid_steps": stats["grid_steps"],
               "summary": summary, "levels": lv}
    return results, gates, None


# ---------------------------------------------------------------------- verify

def _paired(ref, other) -> tuple[float, float]:
    d = ref.values - other.values
    n = d.size
    mean = math.fsum(d) / n
    return mean, math.sqrt(math.fsum((d - mean) ** 2) / (n - 1) / n)


def verify_frontrunner(a) -> tuple[dict, list]:
    from .examples import frontrunner as fr
    from .hjb import constant_control, hjb_residuals, martingale_drift_test, mc_value
    from .timechange import grid_for_lookahead

    p = fr.FrontrunnerParams(Lam=a.lam, delta=a.delta, T=a.T, Phi0=a.phi0)
    grid = grid_for_lookahead(p.T, p.delta, a.n)
    prob = fr.problem(p)
    results, gates = {"grid_steps": grid.N}, []
    ident = fr.upsilon_omega_identities(p)
    results["identities"] = ident
    for key in ("upsilon_defect", "omega_defect"):
        gates.append(rpt.gate(key, ident[key], 1e-5, ident[key] < 1e-5))
    pr = fr.probes(p, grid, a.probes, a.seed)
    drop = ("z-trace",) if a.ablate == "z-trace" else ()
    cand = fr.candidate(p, ablate="transport" if a.ablate == "transport" else None)
    res = hjb_residuals(cand, prob, pr, drop=drop).summary()
    results["residuals"] = res
    gates += [rpt.gate("parabolic", res["parabolic"]["max"], 1e-6, res["parabolic"]["max"] < 1e-6),
              rpt.gate("transport", res["transport"]["max"], 1e-6, res["transport"]["max"] < 1e-6),
              rpt.gate("terminal", res["terminal"]["max"], 1e-12, res["terminal"]["max"] <= 1e-12)]
    if a.ablate:
        results["ablation"] = a.ablate
        results["monte_carlo"] = "skipped under ablation"
        return results, gates
    y0 = [0.0, p.Phi0, 0.0]
    info = np.zeros((grid.index(p.delta) + 1, 1))
    target = fr.value_t0(p)
    if a.samples > 0:
        star = mc_value(prob, fr.optimal_feedback(p), 0.0, y0, info, a.samples, grid, a.seed, threads=a.threads)
        tol = max(3 * star.stderr, 0.05 * abs(target))
        results["value_t0"] = target
        results["mc_optimal"] = star.to_dict()
        gates.append(rpt.gate("mc_value", abs(star.mean - target), tol, abs(star.mean - target) <= tol,
                              "max(3 stderr, 5%)"))
        comp = {}
        for v in (0.0, 0.5, -0.5):
            alt = mc_value(prob, constant_control(v), 0.0, y0, info, a.samples, grid, a.seed, threads=a.threads)
            diff, se = _paired(star, alt)
            comp[f"phi={v:g}"] = {**alt.to_dict(), "paired_advantage": diff, "paired_stderr": se}
            gates.append(rpt.gate(f"beats_phi={v:g}", diff, -3 * se, diff > -3 * se,
                                  "paired advantage of phi* over the constant control"))
        results["alternatives"] = comp
    if a.drift:
        dgrid = grid_for_lookahead(p.T, p.delta, a.drift_n)
        dinfo = np.zeros((dgrid.index(p.delta) + 1, 1))
        cps = np.linspace(0.0, p.T, 5)
        drift = {}
        for name, ctl in (("optimal", fr.optimal_feedback(p)), ("phi=0", constant_control(0.0))):
            rep = martingale_drift_test(cand, prob, ctl, 0.0, y0, dinfo, cps, dgrid, a.seed,
                                        outer=a.outer, inner=a.inner, threads=a.threads)
            drift[name] = rep.to_dict()
            if name == "optimal":
                gates.append(rpt.gate("drift_martingale", (rep.drift / rep.stderr).tolist(), 3.0, rep.within(),
                                      "z-scores under phi*"))
            else:
                gates.append(rpt.gate("drift_supermartingale", (rep.drift / rep.stderr).tolist(), 3.0,
                                      rep.supermartingale(), "z-scores under phi=0"))
        results["drift"] = drift
    return results, gates


def verify_pathwise(a) -> tuple[dict, list]:
    from .examples import pathwise as pw
    from .grid_paths import brownian_batch, make_uniform_grid
    from .hjb import hjb_residuals

    if a.ablate:
        raise UsageError("--ablate applies to the frontrunner example only")
    results, gates = {}, []
    grid = make_uniform_grid(a.T, a.n)
    res = hjb_residuals(pw.candidate(), pw.problem(a.T), pw.probes(grid, a.probes, a.seed), mode="state").summary()
    results["residuals"] = res
    worst = max(res[k]["max"] for k in ("parabolic", "transport", "terminal"))
    gates.append(rpt.gate("candidate_residuals", worst, 1e-8, worst < 1e-8))
    reach = pw.reachable_check(a.T, a.n, a.paths, a.seed)
    results["reachable"] = reach
    gates.append(rpt.gate("reachable_terminal", reach["max_err_solver"], 1e-3, reach["max_err_solver"] < 1e-3))
    short = pw.short_branch_check(a.short_T, a.n, 50, a.seed + 1)
    results["short_branch"] = short
    gates.append(rpt.gate("short_branch", short["max_gap"], 1e-2, short["max_gap"] < 1e-2))
    fine = make_uniform_grid(a.T, a.cross_n)
    W = brownian_batch(fine, 1, a.seed, range(4))
    x0 = 0.5
    Xs = pw.stratonovich_solve(x0, 1.0, W, fine)[:, :, 0]
    Xf = np.stack([pw.solution_formula(0.0, x0, 1.0, W[r, :, 0], fine) for r in range(W.shape[0])])
    gap = float(np.abs(Xs - Xf).max())
    results["formula_vs_solver"] = {"N": fine.N, "paths": W.shape[0], "max_gap": gap}
    gates.append(rpt.gate("formula_vs_solver", gap, 1e-2, gap < 1e-2))
    ce = pw.transport_counterexample(a.short_T, seed=a.seed + 2)
    results["counterexample"] = ce
    gates.append(rpt.gate("counterexample_parabolic", ce["parabolic_max"], 1e-12, ce["parabolic_max"] <= 1e-12))
    gates.append(rpt.gate("counterexample_transport_nonzero", ce["transport_max"], 0.0, ce["transport_max"] > 0))
    gates.append(rpt.gate("counterexample_value_mismatch", ce["mismatch_mean"], 3 * ce["mismatch_stderr"],
                          ce["mismatch_significant"], "claimed minus true value"))
    return results, gates


def verify_insider(a) -> tuple[dict, list]:
    from .examples import insider as ins
    from .grid_paths import make_uniform_grid

    if a.ablate:
        raise UsageError("--ablate applies to the frontrunner example only")
    p = ins.InsiderParams(eps=a.eps, sigma0=a.sigma0, T=a.T)
    grid = make_uniform_grid(p.T, a.n)
    good = ins.residual_check(p, grid, a.probes, a.seed, ins.CORRECT_FACTOR)
    printed = ins.residual_check(p, grid, a.probes, a.seed, ins.PRINTED_FACTOR)
    phi_err = float(np.abs(good["phi_star"] - good["phi_expected"]).max())
    results = {
        "coefficient": p.coefficient(ins.CORRECT_FACTOR),
        "corrected": {k: good[k] for k in ("parabolic_max", "transport_max", "terminal_max")},
        "phi_star_max_error": phi_err,
        "printed_coefficient": {
            "coefficient": p.coefficient(ins.PRINTED_FACTOR),
            "parabolic_max": printed["parabolic_max"],
            "predicted_max": float(np.abs(printed["predicted"]).max()),
            "matches_prediction": bool(np.allclose(printed["parabolic"], printed["predicted"], atol=1e-10)),
        },
    }
    gates = [rpt.gate("transport_exact", good["transport_max"], 0.0, good["transport_max"] == 0.0),
             rpt.gate("parabolic", good["parabolic_max"], 1e-8, good["parabolic_max"] < 1e-8),
             rpt.gate("terminal", good["terminal_max"], 0.0, good["terminal_max"] == 0.0),
             rpt.gate("phi_star", phi_err, 1e-8, phi_err < 1e-8)]
    return results, gates


def cmd_verify(a) -> tuple[dict, list, object]:
    fn = {"frontrunner": verify_frontrunner, "pathwise": verify_pathwise, "insider": verify_insider}[a.example]
    results, gates = fn(a)
    return {"example": a.example, **results}, gates, None


# ------------------------------------------------------------------- ito-check

def cmd_ito_check(a) -> tuple[dict, list, object]:
    from .funcito import FUNCTIONALS, decompose_seeds
    from .grid_paths import make_uniform_grid
    from .rde import linear_coefficients
    from .timechange import parse_timechange

    if a.functional not in FUNCTIONALS:
        raise UsageError(f"unknown functional {a.functional!r}; choose from {sorted(FUNCTIONALS)}")
    tc = parse_timechange(a.tau, a.T)
    co = linear_coefficients(a.sigma)
    F = FUNCTIONALS[a.functional]()
    if a.refine < 1 or a.refine_factor < 2 or a.n % a.refine_factor ** (a.refine - 1):
        raise UsageError("--n must be divisible by refine-factor^(refine - 1)")
    ns = [a.n // a.refine_factor ** j for j in reversed(range(a.refine))]
    seeds = range(a.seed, a.seed + a.seeds)
    levels = []
    for n in ns:
        grid = make_uniform_grid(a.T, n)
        decs = decompose_seeds(F, co, grid, seeds, tc, [a.y0], a.oversample)
        r = np.array([abs(d.residual) for d in decs])
        ito = np.array([abs(d.ito_term) for d in decs])
        levels.append({"N": n, "median_abs_residual": float(np.median(r)), "max_abs_residual": float(r.max()),
                       "max_abs_ito_term": float(ito.max()),
                       "mean_terms": {k: math.fsum(getattr(d, k) for d in decs) / len(decs)
                                      for k in ("lhs", "time_term", "drift_term", "rough_term", "ito_term")}})
    top = levels[-1]
    gates = [rpt.gate("median_residual", top["median_abs_residual"], a.tol, top["median_abs_residual"] < a.tol)]
    if len(levels) > 1:
        series = [lv["median_abs_residual"] for lv in levels]
        gates.append(rpt.gate("residual_decreasing", series, "strictly decreasing",
                              all(b < a_ for a_, b in zip(series, series[1:])) or series[-1] < 1e-12))
    if tc.kind == "full":
        gates.append(rpt.gate("ito_term_zero", top["max_abs_ito_term"], 0.0, top["max_abs_ito_term"] == 0.0,
                              "tau = T leaves W o tau constant"))
    return {"functional": a.functional, "tau": a.tau, "seeds": a.seeds, "levels": levels}, gates, None


# -------------------------------------------------------------------- plumbing

COMMANDS = {"lift": cmd_lift, "qv": cmd_qv, "verify": cmd_verify, "ito-check": cmd_ito_check}
_NOT_CONFIG = {"command", "config", "output", "format", "threads"}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--output", type=Path, help="write the report here instead of stdout")
    common.add_argument("--format", choices=("json", "csv"), default="json")
    common.add_argument("--config", type=Path, help="key = value file merged under the flags")
    common.add_argument("--threads", type=int, default=1, help="worker threads; 0 means all cores")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--T", type=float, default=1.0)

    parser = _Parser(prog="roughhjb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("lift", parents=[common], help="lift a path and check Chen's relation")
    p.add_argument("--input", type=Path, help="CSV with header t,x1,...,xd")
    p.add_argument("--brownian", type=int, metavar="D", help="simulate a D-dimensional Brownian path")
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--oversample", type=int, default=8)
    p.add_argument("--alpha", type=float, default=0.45)
    p.add_argument("--triples", type=int, default=10_000)

    p = sub.add_parser("qv", parents=[common], help="quadratic variation of (W, W o tau)")
    p.add_argument("--tau", default="lookahead:0.1")
    p.add_argument("--levels", type=int, default=10)
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--qv-tol", type=float, default=0.03)

    p = sub.add_parser("verify", parents=[common], help="HJB residual and Monte Carlo gates for an example")
    p.add_argument("--example", choices=("frontrunner", "pathwise", "insider"), required=True)
    p.add_argument("--ablate", choices=("transport", "z-trace"))
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--phi0", type=float, default=0.0)
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--sigma0", type=float, default=0.2)
    p.add_argument("--drift", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--drift-n", type=int, default=1024)
    p.add_argument("--outer", type=int, default=64)
    p.add_argument("--inner", type=int, default=64)
    p.add_argument("--paths", type=int, default=20)
    p.add_argument("--short-T", type=float, default=0.5)
    p.add_argument("--cross-n", type=int, default=2 ** 14)

    p = sub.add_parser("ito-check", parents=[common], help="functional Itô decomposition residuals")
    p.add_argument("--functional", default="square")
    p.add_argument("--n", type=int, default=2 ** 14)
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--refine", type=int, default=3, help="number of levels, finest last")
    p.add_argument("--refine-factor", type=int, default=4)
    p.add_argument("--tau", default="lookahead:0.25")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--y0", type=float, default=1.0)
    p.add_argument("--oversample", type=int, default=4)
    p.add_argument("--tol", type=float, default=2e-2)
    return parser


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        return action.choices[name]


def read_config(file: Path) -> dict:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + Path(file).read_text())
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"config {file}: {exc}") from None
    return {k.replace("-", "_"): v for k, v in cp["run"].items()}


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    sub = _subparser(parser, args.command)
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in read_config(args.config).items():
        act = actions.get(key)
        if act is None or key in ("config", "help"):
            raise UsageError(f"config key {key!r} is not an option of {args.command}")
        if isinstance(act, argparse.BooleanOptionalAction):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} needs a boolean")
            defaults[key] = low in ("true", "1", "yes")
            continue
        try:
            val = act.type(raw) if act.type else raw
        except (TypeError, ValueError):
            raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from None
        if act.choices is not None and val not in act.choices:
            raise UsageError(f"config key {key!r}: {val!r} not in {sorted(act.choices)}")
        defaults[key] = val
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def run(argv=None) -> tuple[int, dict | None]:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        a = parse_args(argv)
        if a.threads < 0:
            raise UsageError("--threads must be >= 0")
        a.threads = a.threads or (os.cpu_count() or 1)
        start = time.perf_counter()
        results, gates, extra = COMMANDS[a.command](a)
    except UsageError as exc:
        print(f"roughhjb: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE, None
    except InvalidArgument as exc:
        print(f"roughhjb: error: {exc}", file=sys.stderr)
        return EXIT_USAGE, None
    except DivergenceError as exc:
        print(f"roughhjb: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE, None
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(a).items())
              if k not in _NOT_CONFIG}
    report = rpt.make_report(a.command, config, results, gates,
                             {"threads": a.threads, "elapsed_s": time.perf_counter() - start})
    if a.format == "json":
        text = rpt.to_json(report)
    elif a.command == "lift":
        from .grid_paths import path_to_csv
        text = path_to_csv(extra.base)
    else:
        text = rpt.to_csv(report)
    if a.output:
        a.output.write_text(text)
    else:
        sys.stdout.write(text)
    for g in gates:
        if not g["passed"]:
            print(f"roughhjb: gate failed: {g['name']} (value {g['value']}, threshold {g['threshold']})",
                  file=sys.stderr)
    return (EXIT_PASS if report["status"] == "pass" else EXIT_GATE), report


def main(argv=None) -> int:
    code, _ = run(argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
