"""Finite-difference oracles for value functions, envelope reports and parameter sweeps."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .calcvar import (
    VariationalProblem,
    envelope_gradient_variational,
    envelope_variational,
    solve_variational,
)
from .errors import EnvsensError
from .static_opt import KktPoint, SolverOptions, envelope_directional, envelope_gradient, solve

STEPS = (1e-3, 5e-4, 2.5e-4)
TOL_STATIC = 1e-5
TOL_VARIATIONAL = 1e-4


class FdProbeError(EnvsensError):
    def __init__(self, probe, cause: Exception):
        super().__init__(f"value function failed at probe {np.round(probe, 15).tolist()}: {cause}")
        self.probe = probe
        self.cause = cause


@dataclass(frozen=True)
class FdEstimate:
    value: float
    step_used: float
    error_estimate: float
    one_sided: bool = False


def _probe(value_fn, pi0, varpi, h):
    pt = pi0 + h * varpi
    try:
        return float(value_fn(pt))
    except EnvsensError as exc:
        raise FdProbeError(pt, exc) from exc


def fd_directional(value_fn: Callable, pi0, varpi, one_sided: bool = False) -> FdEstimate:
    """Richardson-extrapolated difference quotient of ``value_fn`` along ``varpi``.

    Central mode combines the two smallest steps of the fixed schedule;
    one-sided mode uses forward quotients at all three steps and two levels of
    extrapolation.  The error estimate is the gap between the extrapolated
    value and the next-best estimate.
    """
    pi0 = np.atleast_1d(np.asarray(pi0, dtype=float))
    varpi = np.atleast_1d(np.asarray(varpi, dtype=float))
    if not one_sided:
        h1, h2 = STEPS[1], STEPS[2]
        d1 = (_probe(value_fn, pi0, varpi, h1) - _probe(value_fn, pi0, varpi, -h1)) / (2 * h1)
        d2 = (_probe(value_fn, pi0, varpi, h2) - _probe(value_fn, pi0, varpi, -h2)) / (2 * h2)
        extra = (4 * d2 - d1) / 3
        return FdEstimate(value=extra, step_used=h2, error_estimate=abs(extra - d2))
    v0 = _probe(value_fn, pi0, varpi, 0.0)
    fwd = [(_probe(value_fn, pi0, varpi, h) - v0) / h for h in STEPS]
    r1a = 2 * fwd[1] - fwd[0]
    r1b = 2 * fwd[2] - fwd[1]
    extra = (4 * r1b - r1a) / 3
    return FdEstimate(value=extra, step_used=STEPS[2], error_estimate=abs(extra - r1b), one_sided=True)


# --------------------------------------------------------------------------
# Envelope vs oracle
# --------------------------------------------------------------------------


@dataclass
class EnvelopeReport:
    problem: str
    kind: str
    pi: np.ndarray
    direction: np.ndarray
    x: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    active: tuple[int, ...]
    V: float
    envelope: float
    terms: dict
    oracle: FdEstimate
    abs_error: float
    rel_error: float
    tolerance: float
    passed: bool
    warnings: list[str] = field(default_factory=list)
    branch_envelopes: list[float] = field(default_factory=list)
    N: Optional[int] = None
    solution: object = field(default=None, repr=False)  # KktPoint or VariationalSolution

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict:
        return {
            "problem": {"name": self.problem, "kind": self.kind, **({"N": self.N} if self.N else {})},
            "pi": _floats(self.pi),
            "direction": _floats(self.direction),
            "solution": {
                "x": _nested(self.x),
                "lambda": _floats(self.lam),
                "mu": _floats(self.mu),
                "active": [i + 1 for i in self.active],
                "V": _float(self.V),
            },
            "envelope": {
                "total": _float(self.envelope),
                "terms": [{"name": k, "value": _float(v)} for k, v in self.terms.items()],
                "branches": [_float(v) for v in self.branch_envelopes],
            },
            "oracle": {
                "value": _float(self.oracle.value),
                "error_estimate": _float(self.oracle.error_estimate),
                "step": _float(self.oracle.step_used),
                "one_sided": self.oracle.one_sided,
            },
            "abs_error": _float(self.abs_error),
            "rel_error": _float(self.rel_error),
            "tolerance": _float(self.tolerance),
            "warnings": list(self.warnings),
            "verdict": self.verdict,
        }


def _float(v) -> Optional[float]:
    v = float(v)
    return v + 0.0 if math.isfinite(v) else None


def _nested(a):
    a = np.asarray(a, dtype=float)
    return _float(a) if a.ndim == 0 else [_nested(r) for r in a]


def _floats(a) -> list:
    return [_float(v) for v in np.atleast_1d(np.asarray(a, dtype=float)).ravel()]


class _Evaluator:
    """Solve-and-cache wrapper shared by the oracle probes of one report."""

    def __init__(self, problem, N: Optional[int], opts: SolverOptions):
        self.problem = problem
        self.N = N
        self.opts = opts
        self.cache: dict = {}
        self.variational = isinstance(problem, VariationalProblem)

    def __call__(self, pi):
        key = tuple(np.round(np.atleast_1d(pi), 15))
        if key not in self.cache:
            if self.variational:
                self.cache[key] = solve_variational(self.problem, pi, self.N, self.opts)
            else:
                self.cache[key] = solve(self.problem, pi, self.opts)
        return self.cache[key]

    def value(self, pi) -> float:
        sol = self(pi)
        return sol.V

    def active(self, pi):
        return tuple(self(pi).active)


def _kkt_of(sol) -> KktPoint:
    return sol.kkt if hasattr(sol, "kkt") else sol


def compare_envelope(
    problem,
    pi0,
    varpi,
    N: Optional[int] = None,
    opts: SolverOptions = SolverOptions(),
) -> EnvelopeReport:
    """Envelope-formula derivative at ``pi0`` checked against a finite-difference oracle.

    When the probes see a different active set than the base point, forward
    one-sided differences along ``varpi`` are used instead (right derivative).
    """
    pi0 = np.atleast_1d(np.asarray(pi0, dtype=float))
    varpi = np.atleast_1d(np.asarray(varpi, dtype=float))
    variational = isinstance(problem, VariationalProblem)
    if variational and N is None:
        raise ValueError("variational problems need a segment count N")
    ev = _Evaluator(problem, N, opts)
    base = ev(pi0)
    kkt = _kkt_of(base)
    if variational:
        env = envelope_variational(problem, pi0, varpi, base)
        branch_vals = []
    else:
        env = envelope_directional(problem, kkt, varpi)
        branch_vals = [envelope_directional(problem, b, varpi).total for b in kkt.branches]

    warnings = []
    one_sided = False
    central = [pi0 + s * h * varpi for h in STEPS[1:] for s in (1, -1)]
    try:
        sets = {ev.active(p) for p in central}
        if sets != {tuple(base.active)}:
            one_sided = True
            warnings.append("active-set change between probes: using one-sided differences")
    except EnvsensError:
        one_sided = True
        warnings.append("solver failed on a backward probe: using one-sided differences")
    oracle = fd_directional(ev.value, pi0, varpi, one_sided=one_sided)

    tol = max(TOL_VARIATIONAL if variational else TOL_STATIC, 10 * oracle.error_estimate)
    abs_err = abs(env.total - oracle.value)
    rel_err = abs_err / abs(oracle.value) if oracle.value != 0 else (0.0 if abs_err == 0 else math.inf)
    for b in branch_vals:
        if abs(b - env.total) > tol:
            warnings.append(f"maximizers disagree: another branch gives envelope {b:.6g}")
    return EnvelopeReport(
        problem=getattr(problem, "name", "") or "",
        kind="variational" if variational else "static",
        pi=pi0,
        direction=varpi,
        x=base.trajectory.nodes if variational else kkt.x,
        lam=base.lam,
        mu=base.mu,
        active=tuple(base.active),
        V=base.V,
        envelope=env.total,
        terms=dict(env.terms),
        oracle=oracle,
        abs_error=abs_err,
        rel_error=rel_err,
        tolerance=tol,
        passed=abs_err <= tol,
        warnings=warnings,
        branch_envelopes=branch_vals,
        N=N,
        solution=base,
    )


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------


@dataclass
class SweepTrace:
    pis: np.ndarray  # (count, m)
    values: np.ndarray
    lambdas: np.ndarray  # (count, k)
    mus: np.ndarray  # (count, l)
    active_sets: list
    envelope_grads: np.ndarray  # (count, m)
    errors: list
    max_multiplier_jump: float

    @property
    def failures(self) -> int:
        return sum(e is not None for e in self.errors)

    def active_set_changes(self) -> int:
        sets = [a for a, e in zip(self.active_sets, self.errors) if e is None]
        return sum(a != b for a, b in zip(sets, sets[1:]))

    def csv_header(self) -> list[str]:
        m, k, l = self.pis.shape[1], self.lambdas.shape[1], self.mus.shape[1]
        return (
            [f"pi{i + 1}" for i in range(m)]
            + ["V"]
            + [f"lambda{i + 1}" for i in range(k)]
            + [f"mu{j + 1}" for j in range(l)]
            + [f"dV_dpi{i + 1}" for i in range(m)]
            + ["active", "error"]
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        for i in range(len(self.values)):
            row = [repr(float(v)) for v in self.pis[i]]
            if self.errors[i] is None:
                row += [repr(float(v) + 0.0) for v in [self.values[i], *self.lambdas[i], *self.mus[i], *self.envelope_grads[i]]]
                row.append(";".join(str(a + 1) for a in self.active_sets[i]))
                row.append("")
            else:
                row += [""] * (1 + self.lambdas.shape[1] + self.mus.shape[1] + self.pis.shape[1] + 1)
                row.append(self.errors[i])
            w.writerow(row)
        return buf.getvalue()

    def to_dict(self) -> dict:
        points = []
        for i in range(len(self.values)):
            ok = self.errors[i] is None
            points.append(
                {
                    "pi": _floats(self.pis[i]),
                    "V": _float(self.values[i]) if ok else None,
                    "lambda": _floats(self.lambdas[i]) if ok else None,
                    "mu": _floats(self.mus[i]) if ok else None,
                    "envelope_gradient": _floats(self.envelope_grads[i]) if ok else None,
                    "active": [a + 1 for a in self.active_sets[i]] if ok else None,
                    "error": self.errors[i],
                }
            )
        return {
            "points": points,
            "max_multiplier_jump": _float(self.max_multiplier_jump),
            "active_set_changes": self.active_set_changes(),
            "failures": self.failures,
        }


def _sweep_point(problem, pi, N, opts):
    if isinstance(problem, VariationalProblem):
        sol = solve_variational(problem, pi, N, opts)
        return sol.V, sol.lam, sol.mu, tuple(sol.active), envelope_gradient_variational(problem, sol), sol.kkt.x
    kkt = solve(problem, pi, opts)
    return kkt.objective, kkt.lam, kkt.mu, kkt.active, envelope_gradient(problem, kkt), kkt.x


def sweep(
    problem,
    pi_start,
    pi_end,
    count: int,
    N: Optional[int] = None,
    opts: SolverOptions = SolverOptions(),
    warm_start: bool = True,
    threads: int = 1,
) -> SweepTrace:
    """Solve along a uniform parameter grid, recording multipliers and envelope gradients.

    Solver failures are recorded per point without aborting.  With
    ``warm_start`` each solve also starts from the previous solution, which
    forces sequential evaluation.
    """
    if count < 2:
        raise ValueError("a sweep needs at least two points")
    a = np.atleast_1d(np.asarray(pi_start, dtype=float))
    b = np.atleast_1d(np.asarray(pi_end, dtype=float))
    if a.shape != (problem.m,) or b.shape != (problem.m,):
        raise ValueError(f"sweep end points must have length {problem.m}")
    if isinstance(problem, VariationalProblem) and N is None:
        raise ValueError("variational problems need a segment count N")
    s = np.linspace(0.0, 1.0, count)
    pis = a[None] + s[:, None] * (b - a)[None]
    results: list = [None] * count

    def run(i, o):
        try:
            return _sweep_point(problem, pis[i], N, o), None
        except EnvsensError as exc:
            return None, f"{type(exc).__name__}: {exc}"

    if warm_start or threads <= 1:
        prev_x = None
        for i in range(count):
            o = replace(opts, x0=prev_x) if (warm_start and prev_x is not None) else opts
            results[i] = run(i, o)
            if results[i][0] is not None:
                prev_x = results[i][0][5]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda i: run(i, opts), range(count)))

    k, l, m = problem.k, problem.l, problem.m
    values = np.full(count, np.nan)
    lambdas = np.full((count, k), np.nan)
    mus = np.full((count, l), np.nan)
    grads = np.full((count, m), np.nan)
    active_sets: list = [()] * count
    errors: list = [None] * count
    for i, (res, err) in enumerate(results):
        if res is None:
            errors[i] = err
            continue
        values[i], lambdas[i], mus[i], active_sets[i], grads[i], _ = res
    jump = 0.0
    for i in range(count - 1):
        if errors[i] is None and errors[i + 1] is None and active_sets[i] == active_sets[i + 1]:
            d = np.concatenate([lambdas[i + 1] - lambdas[i], mus[i + 1] - mus[i]])
            if d.size:
                jump = max(jump, float(np.abs(d).max()))
    return SweepTrace(
        pis=pis,
        values=values,
        lambdas=lambdas,
        mus=mus,
        active_sets=active_sets,
        envelope_grads=grads,
        errors=errors,
        max_multiplier_jump=jump,
    )
