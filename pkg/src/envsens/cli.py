"""Command-line front end.

Exit codes: 0 success, 2 input error, 3 oracle mismatch, 4 solver failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import problemfile
from .calcvar import (
    VariationalProblem,
    constraint_qualification,
    dubois_reymond_residual,
    solve_variational,
)
from .errors import EnvsensError, ProblemFileError
from .static_opt import solve
from .verify import compare_envelope, sweep

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_MISMATCH = 3
EXIT_SOLVER = 4
DEFAULT_N = 100
CQ_WARN = 1e-8


class InputError(EnvsensError):
    pass


# --------------------------------------------------------------------------
# Formatting helpers
# --------------------------------------------------------------------------


def fmt(v) -> str:
    v = float(v)
    return f"{v + 0.0:.6g}" if math.isfinite(v) else str(v)


def fmt_vec(a) -> str:
    return "[" + ", ".join(fmt(v) for v in np.ravel(a)) + "]"


def jnum(v):
    v = float(v)
    return v + 0.0 if math.isfinite(v) else None


def jlist(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return jnum(a)
    return [jlist(r) for r in a]


def write_json(path: str, obj) -> None:
    text = json.dumps(obj, indent=2, allow_nan=False) + "\n"
    if path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def problem_info(pf: problemfile.ProblemFile, N: Optional[int]) -> dict:
    n, m, k, l = pf.dims
    d = {"name": pf.name, "kind": pf.kind, "n": n, "m": m, "k": k, "l": l}
    if pf.kind == "variational":
        d["T"] = jnum(pf.problem.T)
        d["N"] = N
    return d


def header(pf, N) -> str:
    n, m, k, l = pf.dims
    s = f"problem: {pf.name} ({pf.kind}, n={n}, m={m}, k={k}, l={l}"
    if pf.kind == "variational":
        s += f", T={fmt(pf.problem.T)}, N={N}"
    return s + ")"


def multiplier_line(lam, mu) -> str:
    parts = [f"lambda{i + 1} = {fmt(v)}" for i, v in enumerate(lam)]
    parts += [f"mu{j + 1} = {fmt(v)}" for j, v in enumerate(mu)]
    return "  multipliers: " + ("  ".join(parts) if parts else "(none)")


def active_str(active) -> str:
    return "{" + ", ".join(str(a + 1) for a in active) + "}"


# --------------------------------------------------------------------------
# Argument handling
# --------------------------------------------------------------------------


def _load(args) -> problemfile.ProblemFile:
    pf = problemfile.load(args.path)
    over = {"tol_stat": getattr(args, "tol_stat", None), "tol_feas": getattr(args, "tol_feas", None)}
    pf.options = pf.options.with_overrides(**over)
    return pf


def _vec(values, m: int, flag: str) -> np.ndarray:
    if values is None:
        raise InputError(f"{flag} is required")
    v = np.asarray(values, dtype=float)
    if v.shape != (m,):
        raise InputError(f"{flag} needs {m} value(s), got {v.size}")
    return v


def _N(args, pf) -> Optional[int]:
    if pf.kind != "variational":
        return None
    N = args.N if getattr(args, "N", None) is not None else (pf.N or DEFAULT_N)
    if N < 2:
        raise InputError("--N must be at least 2")
    return N


def _solve(pf, pi, N):
    if isinstance(pf.problem, VariationalProblem):
        return solve_variational(pf.problem, pi, N, pf.options)
    return solve(pf.problem, pi, pf.options)


def _solution_dict(pf, sol) -> dict:
    if pf.kind == "variational":
        x = sol.trajectory.nodes
        kkt = sol.kkt
    else:
        x = sol.x
        kkt = sol
    return {
        "x": jlist(x),
        "lambda": jlist(kkt.lam),
        "mu": jlist(kkt.mu),
        "active": [a + 1 for a in kkt.active],
        "V": jnum(kkt.objective),
        "stationarity_residual": jnum(kkt.stationarity_residual),
        "licq_margin": jnum(kkt.licq_margin),
    }


def _print_solution(pf, sol) -> None:
    kkt = sol.kkt if pf.kind == "variational" else sol
    if pf.kind == "variational":
        print(f"solution: {sol.N} segments (nodes in JSON)  V = {fmt(kkt.objective)}")
    else:
        print(f"solution: x = {fmt_vec(kkt.x)}  V = {fmt(kkt.objective)}")
    print(multiplier_line(kkt.lam, kkt.mu))
    print(f"  active inequalities: {active_str(kkt.active)}")
    print(f"  stationarity residual: {fmt(kkt.stationarity_residual)}  LICQ margin: {fmt(kkt.licq_margin)}")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_check(args) -> int:
    pf = _load(args)
    print(f"OK: {pf.summary()}")
    for v in pf.unused:
        print(f"note: variable {v} is not used by any expression")
    if args.json:
        write_json(args.json, {"problem": problem_info(pf, pf.N), "unused": list(pf.unused), "verdict": "OK"})
    return EXIT_OK


def cmd_solve(args) -> int:
    pf = _load(args)
    pi = _vec(args.pi, pf.problem.m, "--pi")
    N = _N(args, pf)
    sol = _solve(pf, pi, N)
    print(header(pf, N))
    print(f"pi = {fmt_vec(pi)}")
    _print_solution(pf, sol)
    if args.json:
        write_json(
            args.json,
            {"problem": problem_info(pf, N), "pi": jlist(pi), "solution": _solution_dict(pf, sol), "verdict": "SOLVED"},
        )
    return EXIT_OK


def cmd_envelope(args) -> int:
    pf = _load(args)
    m = pf.problem.m
    pi = _vec(args.pi, m, "--pi")
    if args.dir is None and m == 1:
        args.dir = [1.0]
    d = _vec(args.dir, m, "--dir")
    N = _N(args, pf)
    rep = compare_envelope(pf.problem, pi, d, N=N, opts=pf.options)
    print(header(pf, N))
    print(f"pi = {fmt_vec(pi)}  direction = {fmt_vec(d)}")
    _print_solution(pf, rep.solution)
    print("envelope decomposition:")
    for name, val in rep.terms.items():
        print(f"  {name:<8} {fmt(val)}")
    print(f"  {'total':<8} {fmt(rep.envelope)}")
    for b in rep.branch_envelopes:
        print(f"  other maximizer: {fmt(b)}")
    mode = "one-sided" if rep.oracle.one_sided else "central"
    print(
        f"oracle ({mode}, step {fmt(rep.oracle.step_used)}): {fmt(rep.oracle.value)}"
        f"  (error estimate {fmt(rep.oracle.error_estimate)})"
    )
    print(f"abs error {fmt(rep.abs_error)}  rel error {fmt(rep.rel_error)}  tolerance {fmt(rep.tolerance)}")
    for w in rep.warnings:
        print(f"warning: {w}")
    print(f"verdict: {rep.verdict}")
    if args.json:
        out = rep.to_dict()
        out["problem"] = problem_info(pf, N)
        out["solution"] = _solution_dict(pf, rep.solution)
        write_json(args.json, out)
    return EXIT_OK if rep.passed else EXIT_MISMATCH


def cmd_sweep(args) -> int:
    pf = _load(args)
    m = pf.problem.m
    a = _vec(args.from_, m, "--from")
    b = _vec(args.to, m, "--to")
    if args.points < 2:
        raise InputError("--points must be at least 2")
    if args.threads < 1:
        raise InputError("--threads must be positive")
    N = _N(args, pf)
    tr = sweep(pf.problem, a, b, args.points, N=N, opts=pf.options, warm_start=not args.no_warm_start, threads=args.threads)
    print(header(pf, N))
    cols = tr.csv_header()[:-1]
    print("  ".join(f"{c:>12}" for c in cols))
    for i in range(len(tr.values)):
        cells = [fmt(v) for v in tr.pis[i]]
        if tr.errors[i] is None:
            vals = [tr.values[i], *tr.lambdas[i], *tr.mus[i], *tr.envelope_grads[i]]
            cells += [fmt(v) for v in vals] + [";".join(str(x + 1) for x in tr.active_sets[i])]
        else:
            cells += [f"error: {tr.errors[i]}"]
        print("  ".join(f"{c:>12}" for c in cells))
    print(f"active-set changes: {tr.active_set_changes()}  max multiplier jump: {fmt(tr.max_multiplier_jump)}")
    if tr.failures:
        print(f"warning: {tr.failures} of {len(tr.values)} point(s) failed")
    if args.csv:
        Path(args.csv).write_text(tr.to_csv())
    if args.json:
        out = {"problem": problem_info(pf, N), **tr.to_dict()}
        write_json(args.json, out)
    return EXIT_OK


def cmd_euler_check(args) -> int:
    pf = _load(args)
    if pf.kind != "variational":
        raise InputError("euler-check needs a variational problem file")
    pi = _vec(args.pi, pf.problem.m, "--pi")
    N = _N(args, pf)
    sol = _solve(pf, pi, N)
    dr = dubois_reymond_residual(pf.problem, sol.trajectory, pi, sol.lam, sol.mu)
    margin = constraint_qualification(pf.problem, sol.trajectory, pi)
    print(header(pf, N))
    print(f"pi = {fmt_vec(pi)}")
    _print_solution(pf, sol)
    print(f"DuBois-Reymond residual: sup {fmt(dr.residual_sup)}  L2 {fmt(dr.residual_l2)}")
    print(f"fitted c = {fmt_vec(dr.c)}")
    print(f"CQ margin: {fmt(margin)}")
    if args.json:
        write_json(
            args.json,
            {
                "problem": problem_info(pf, N),
                "pi": jlist(pi),
                "solution": _solution_dict(pf, sol),
                "dubois_reymond": {
                    "c": jlist(dr.c),
                    "residual_sup": jnum(dr.residual_sup),
                    "residual_l2": jnum(dr.residual_l2),
                },
                "cq_margin": jnum(margin),
                "verdict": "OK",
            },
        )
    return EXIT_OK


def cmd_cq_check(args) -> int:
    pf = _load(args)
    pi = _vec(args.pi, pf.problem.m, "--pi")
    N = _N(args, pf)
    p = pf.problem
    notes = []
    point = "solution"
    if pf.kind == "variational":
        try:
            traj = _solve(pf, pi, N).trajectory
        except EnvsensError as exc:
            traj = p.straight_line(N)
            point = "straight line"
            notes.append(f"solver failed ({exc}); margin evaluated on the straight line between the end points")
        margin = constraint_qualification(p, traj, pi)
        scope = "all constraints"
    else:
        kkt = solve(p, pi, pf.options)
        margin = kkt.licq_margin
        scope = "active constraints"
    print(header(pf, N))
    print(f"pi = {fmt_vec(pi)}")
    for note in notes:
        print(f"note: {note}")
    if math.isinf(margin):
        print(f"CQ margin ({scope}): vacuously qualified")
        verdict = "VACUOUS"
    else:
        print(f"CQ margin ({scope}, at {point}): {fmt(margin)}")
        verdict = "QUALIFIED" if margin > CQ_WARN else "DEGENERATE"
        if margin <= CQ_WARN:
            print("warning: constraint gradients are (nearly) linearly dependent")
    if args.json:
        write_json(
            args.json,
            {
                "problem": problem_info(pf, N),
                "pi": jlist(pi),
                "cq_margin": jnum(margin),
                "scope": scope,
                "evaluated_at": point,
                "notes": notes,
                "verdict": verdict,
            },
        )
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="envsens", description="Envelope-theorem sensitivities of value functions.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, helptext, pi=True, N=True):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("path", help="problem file")
        if pi:
            sp.add_argument("--pi", type=float, nargs="+", help="parameter value")
        if N:
            sp.add_argument("--N", type=int, help="segments for variational problems")
        sp.add_argument("--json", metavar="OUT", help="write a JSON report ('-' for stdout)")
        sp.add_argument("--tol-stat", type=float, dest="tol_stat")
        sp.add_argument("--tol-feas", type=float, dest="tol_feas")
        sp.add_argument("--seed-free", action="store_true", help="accepted for compatibility; starts are always deterministic")
        sp.set_defaults(fn=fn)
        return sp

    add("check", cmd_check, "validate a problem file", pi=False, N=False)
    add("solve", cmd_solve, "solve at one parameter value")
    env = add("envelope", cmd_envelope, "envelope derivative with FD verification")
    env.add_argument("--dir", type=float, nargs="+", help="direction (default 1 when m = 1)")
    sw = add("sweep", cmd_sweep, "solve along a parameter segment", pi=False)
    sw.add_argument("--from", dest="from_", type=float, nargs="+", required=True)
    sw.add_argument("--to", type=float, nargs="+", required=True)
    sw.add_argument("--points", type=int, default=11)
    sw.add_argument("--csv", metavar="OUT")
    sw.add_argument("--threads", type=int, default=1, help="parallel points (only with --no-warm-start)")
    sw.add_argument("--no-warm-start", action="store_true")
    add("euler-check", cmd_euler_check, "DuBois-Reymond residual of a variational solution")
    add("cq-check", cmd_cq_check, "constraint-qualification margin")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.fn(args)
    except (ProblemFileError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EnvsensError as exc:
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
