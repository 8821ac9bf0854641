"""Parameterized nonlinear programs: solving, KKT multipliers and envelope derivatives.

The problem is::

    maximize f(x, pi)  subject to  g_i(x, pi) >= 0,  h_j(x, pi) = 0

The solver enumerates active subsets of the inequalities and, for each,
runs a damped Newton iteration on the equality-constrained stationarity
system from a deterministic set of starts (batched over all starts at once).
Multipliers at the returned point are recomputed from the Gram-Schmidt
basis of the active constraint gradients.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.stats import qmc

from . import expr as ex
from .errors import (
    ActiveSetBudgetError,
    ConstraintQualificationError,
    DependentVectorsError,
    NoKktPointError,
)
from .linalg import gram_schmidt, project, relative_margin


@dataclass(frozen=True)
class SolverOptions:
    tol_stat: float = 1e-8  # stationarity: tol_stat * (1 + |D1 f|)
    tol_feas: float = 1e-9
    tol_comp: float = 1e-8
    tol_act: float = 1e-7
    tol_ind: float = 1e-8
    tol_tie: float = 1e-12
    max_active: int = 12
    max_iter: int = 100
    max_halvings: int = 60
    n_starts: Optional[int] = None
    starts: Optional[np.ndarray] = None
    x0: Optional[np.ndarray] = None
    box_half_width: float = 10.0
    reorthogonalize: bool = False

    def with_overrides(self, **kw) -> "SolverOptions":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


@dataclass
class Derivs:
    """Batched values/derivatives w.r.t. the decision variables (leading axis = batch)."""

    f: np.ndarray
    g: np.ndarray
    h: np.ndarray
    df: Optional[np.ndarray] = None
    dg: Optional[np.ndarray] = None
    dh: Optional[np.ndarray] = None
    d2f: Optional[np.ndarray] = None
    d2g: Optional[np.ndarray] = None
    d2h: Optional[np.ndarray] = None


def _names(prefix: str, count: int) -> tuple[str, ...]:
    return tuple(f"{prefix}{i + 1}" for i in range(count))


def _parse_all(items) -> tuple[ex.Expr, ...]:
    return tuple(ex.parse(s) if isinstance(s, str) else s for s in items)


@dataclass(frozen=True, eq=False)
class ParameterizedNLP:
    """max f(x, pi) s.t. g_i >= 0, h_j = 0, x in an optional open box."""

    n: int
    m: int
    f: ex.Expr
    g: tuple[ex.Expr, ...] = ()
    h: tuple[ex.Expr, ...] = ()
    box: Optional[tuple[np.ndarray, np.ndarray]] = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "g", tuple(self.g))
        object.__setattr__(self, "h", tuple(self.h))
        if self.n < 1 or self.m < 0:
            raise ValueError("need n >= 1 and m >= 0")
        if self.l > self.n:
            raise ValueError(f"{self.l} equality constraints cannot be independent in dimension {self.n}")
        allowed = set(self.x_names) | set(self.pi_names)
        for label, e in self.labelled():
            extra = ex.free_variables(e) - allowed
            if extra:
                raise ValueError(f"{label} references undeclared variables: {', '.join(sorted(extra))}")
        if self.box is not None:
            lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (self.n,)).copy() for b in self.box)
            if np.any(lo >= hi):
                raise ValueError("box lower bounds must be below upper bounds")
            object.__setattr__(self, "box", (lo, hi))

    @classmethod
    def from_strings(cls, n: int, m: int, f: str, g: Sequence[str] = (), h: Sequence[str] = (), **kw):
        return cls(n=n, m=m, f=ex.parse(f), g=_parse_all(g), h=_parse_all(h), **kw)

    @property
    def k(self) -> int:
        return len(self.g)

    @property
    def l(self) -> int:  # noqa: E743
        return len(self.h)

    @property
    def x_names(self) -> tuple[str, ...]:
        return _names("x", self.n)

    @property
    def pi_names(self) -> tuple[str, ...]:
        return _names("pi", self.m)

    @property
    def constraint_names(self) -> tuple[str, ...]:
        return _names("g", self.k) + _names("h", self.l)

    def labelled(self):
        yield "f", self.f
        for i, e in enumerate(self.g):
            yield f"g{i + 1}", e
        for j, e in enumerate(self.h):
            yield f"h{j + 1}", e

    def _env(self, X: np.ndarray, pi) -> dict:
        env = {name: X[..., i] for i, name in enumerate(self.x_names)}
        env.update({name: float(v) for name, v in zip(self.pi_names, np.atleast_1d(pi))})
        return env

    def derivatives(self, X: np.ndarray, pi, order: int, strict: bool = False) -> Derivs:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        env = self._env(X, pi)
        S = X.shape[0]
        res = [ex.derivatives(e, env, self.x_names, order, strict) for _, e in self.labelled()]

        def stack(idx, sl, shape):
            parts = [res[i][idx] for i in sl]
            return np.stack(parts, axis=1) if parts else np.zeros((S, 0) + shape)

        gi, hi = range(1, 1 + self.k), range(1 + self.k, 1 + self.k + self.l)
        d = Derivs(f=res[0][0], g=stack(0, gi, ()), h=stack(0, hi, ()))
        if order >= 1:
            d.df, d.dg, d.dh = res[0][1], stack(1, gi, (self.n,)), stack(1, hi, (self.n,))
        if order >= 2:
            d.d2f = res[0][2]
            d.d2g, d.d2h = stack(2, gi, (self.n, self.n)), stack(2, hi, (self.n, self.n))
        return d

    def param_derivatives(self, x, pi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Partial derivatives w.r.t. the parameters at one point: (f_pi, g_pi, h_pi)."""
        env = self._env(np.asarray(x, dtype=float), pi)
        rows = [ex.derivatives(e, env, self.pi_names, 1, True)[1] for _, e in self.labelled()]
        rows = [np.asarray(r, dtype=float).reshape(self.m) for r in rows]
        g_pi = np.array(rows[1 : 1 + self.k]).reshape(self.k, self.m)
        h_pi = np.array(rows[1 + self.k :]).reshape(self.l, self.m)
        return rows[0], g_pi, h_pi

    def default_starts(self, opts: SolverOptions) -> np.ndarray:
        count = opts.n_starts or 2 ** min(self.n, 6) * 4
        if self.box is not None:
            lo, hi = self.box
        else:
            lo = np.full(self.n, -opts.box_half_width)
            hi = np.full(self.n, opts.box_half_width)
        sampler = qmc.Halton(d=self.n, scramble=False)
        sampler.fast_forward(1)  # the first Halton point is the box corner
        return lo + sampler.random(count) * (hi - lo)

    def in_box(self, x) -> bool:
        if self.box is None:
            return True
        lo, hi = self.box
        return bool(np.all(x > lo) and np.all(x < hi))


# --------------------------------------------------------------------------
# KKT points and multipliers
# --------------------------------------------------------------------------


@dataclass
class KktPoint:
    pi: np.ndarray
    x: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    active: tuple[int, ...]
    stationarity_residual: float
    objective: float
    licq_margin: float = float("inf")
    branches: list["KktPoint"] = field(default_factory=list)

    @property
    def V(self) -> float:
        return self.objective


@dataclass(frozen=True)
class Multipliers:
    lam: np.ndarray
    mu: np.ndarray
    residual: float
    tol: float
    margin: float

    @property
    def stationary(self) -> bool:
        return self.residual <= self.tol

    def __iter__(self):
        return iter((self.lam, self.mu, self.residual))


def active_set(p, x, pi, tol_act: float = SolverOptions.tol_act) -> tuple[int, ...]:
    d = p.derivatives(np.asarray(x, dtype=float)[None], pi, 0, strict=True)
    return tuple(int(i) for i in np.flatnonzero(d.g[0] <= tol_act))


def multipliers(p, pi, x, active: Optional[Sequence[int]] = None, opts: SolverOptions = SolverOptions()) -> Multipliers:
    """KKT multipliers of ``x`` as coordinates of ``-D1 f`` in the active-gradient basis.

    Inactive inequalities get zero multipliers.  Raises
    :class:`ConstraintQualificationError` when the active gradients are
    dependent.  A non-stationary ``x`` is not an error: check ``.stationary``.
    """
    x = np.asarray(x, dtype=float)
    d = p.derivatives(x[None], pi, 1, strict=True)
    if active is None:
        active = tuple(int(i) for i in np.flatnonzero(d.g[0] <= opts.tol_act))
    active = tuple(sorted(active))
    df = d.df[0]
    rows = [d.dg[0, i] for i in active] + [d.dh[0, j] for j in range(p.l)]
    lam = np.zeros(p.k)
    mu = np.zeros(p.l)
    margin = float("inf")
    if rows:
        margin = relative_margin(rows)
        if margin <= opts.tol_ind:
            raise ConstraintQualificationError(
                f"active constraint gradients are linearly dependent (margin {margin:.3e})"
            )
        try:
            basis = gram_schmidt(rows, tol=opts.tol_ind, reorthogonalize=opts.reorthogonalize)
        except DependentVectorsError as exc:
            raise ConstraintQualificationError(str(exc)) from exc
        coords = project(-df, basis).values
        lam[list(active)] = coords[: len(active)]
        mu[:] = coords[len(active) :]
    resid = df + lam @ d.dg[0] + mu @ d.dh[0]
    return Multipliers(
        lam=lam,
        mu=mu,
        residual=float(np.linalg.norm(resid)),
        tol=opts.tol_stat * (1.0 + float(np.linalg.norm(df))),
        margin=margin,
    )


# --------------------------------------------------------------------------
# Batched Newton on the KKT system of one active subset
# --------------------------------------------------------------------------


def _kkt_residual(d: Derivs, A: list[int], z: np.ndarray, n: int) -> np.ndarray:
    a = len(A)
    lam, mu = z[:, n : n + a], z[:, n + a :]
    rx = d.df + np.einsum("sa,san->sn", lam, d.dg[:, A]) + np.einsum("sl,sln->sn", mu, d.dh)
    return np.concatenate([rx, d.g[:, A], d.h], axis=1)


def _kkt_jacobian(d: Derivs, A: list[int], z: np.ndarray, n: int) -> np.ndarray:
    a = len(A)
    lam, mu = z[:, n : n + a], z[:, n + a :]
    H = d.d2f + np.einsum("sa,sanm->snm", lam, d.d2g[:, A]) + np.einsum("sl,slnm->snm", mu, d.d2h)
    C = np.concatenate([d.dg[:, A], d.dh], axis=1)  # (S, a+l, n)
    S, c = C.shape[0], C.shape[1]
    J = np.zeros((S, n + c, n + c))
    J[:, :n, :n] = H
    J[:, :n, n:] = np.transpose(C, (0, 2, 1))
    J[:, n:, :n] = C
    return J


def _solve_batch(J: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        try:
            return np.linalg.solve(J, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            out = np.empty_like(rhs)
            for s in range(J.shape[0]):
                if np.all(np.isfinite(J[s])):
                    out[s] = np.linalg.lstsq(J[s], rhs[s], rcond=None)[0]
                else:
                    out[s] = np.nan
            return out


def _norms(F: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        r = np.linalg.norm(F, axis=1)
    return np.where(np.isfinite(r), r, np.inf)


def _newton_subset(p, pi, starts: np.ndarray, A: list[int], opts: SolverOptions):
    n, S = p.n, starts.shape[0]
    z = np.concatenate([starts, np.zeros((S, len(A) + p.l))], axis=1)
    d = p.derivatives(z[:, :n], pi, 1)
    F = _kkt_residual(d, A, z, n)
    fnorm = _norms(F)
    running = np.isfinite(fnorm)
    for _ in range(opts.max_iter):
        idx = np.flatnonzero(running)
        if idx.size == 0:
            break
        zi = z[idx]
        d2 = p.derivatives(zi[:, :n], pi, 2)
        J = _kkt_jacobian(d2, A, zi, n)
        step = _solve_batch(J, -F[idx])
        t = np.ones(idx.size)
        pending = np.all(np.isfinite(step), axis=1)
        accepted = np.zeros(idx.size, dtype=bool)
        for _ in range(opts.max_halvings + 1):
            sel = np.flatnonzero(pending & ~accepted)
            if sel.size == 0:
                break
            trial = zi[sel] + t[sel, None] * step[sel]
            dt = p.derivatives(trial[:, :n], pi, 1)
            Ft = _kkt_residual(dt, A, trial, n)
            ft = _norms(Ft)
            ok = ft <= (1.0 - 1e-4 * t[sel]) * fnorm[idx[sel]]
            good = sel[ok]
            accepted[good] = True
            z[idx[good]] = trial[ok]
            F[idx[good]] = Ft[ok]
            fnorm[idx[good]] = ft[ok]
            t[sel[~ok]] *= 0.5
        running[idx[~accepted]] = False
        scale = 1.0 + np.abs(z[idx]).max(axis=1)
        small = np.linalg.norm(np.where(np.isfinite(step), step, 0.0), axis=1) <= 1e-15 * scale
        tiny = fnorm[idx] <= 1e-14 * scale
        running[idx[small | tiny]] = False
    return z, F, fnorm


def _subsets(k: int, n: int, l: int):
    for size in range(0, min(k, n - l) + 1):
        yield from itertools.combinations(range(k), size)


def solve(p, pi, opts: SolverOptions = SolverOptions()) -> KktPoint:
    """Best KKT point of ``p`` at parameter ``pi`` over all active subsets and starts."""
    pi = np.atleast_1d(np.asarray(pi, dtype=float))
    if pi.shape != (p.m,) or not np.all(np.isfinite(pi)):
        raise ValueError(f"parameter must be a finite vector of length {p.m}")
    if p.k > opts.max_active:
        raise ActiveSetBudgetError(f"{p.k} inequality constraints exceed the active-set budget {opts.max_active}")
    starts = opts.starts if opts.starts is not None else p.default_starts(opts)
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    if opts.x0 is not None:
        starts = np.vstack([np.asarray(opts.x0, dtype=float)[None], starts])

    found: list[tuple[np.ndarray, tuple[int, ...]]] = []
    best_resid = np.inf
    for A in _subsets(p.k, p.n, p.l):
        z, F, fnorm = _newton_subset(p, pi, starts, list(A), opts)
        best_resid = min(best_resid, float(fnorm.min(initial=np.inf)))
        n = p.n
        for s in np.flatnonzero(np.isfinite(fnorm)):
            x = z[s, :n]
            rx, rc = F[s, :n], F[s, n:]
            d = p.derivatives(x[None], pi, 1)
            if np.linalg.norm(rx) > opts.tol_stat * (1 + np.linalg.norm(d.df[0])):
                continue
            if rc.size and np.abs(rc).max() > opts.tol_feas:
                continue
            if any(np.all(np.abs(x - y) <= 1e-9 * (1 + np.abs(y))) for y, _ in found):
                continue
            found.append((x.copy(), A))

    points = []
    for x, A in found:
        kkt = _validate(p, pi, x, A, opts)
        if kkt is not None:
            points.append(kkt)
    if not points:
        raise NoKktPointError(
            f"no KKT point found at pi={pi.tolist()} (best residual {best_resid:.3e})",
            best_residual=best_resid,
        )
    vmax = max(q.objective for q in points)
    top = [q for q in points if q.objective >= vmax - opts.tol_tie]
    top.sort(key=lambda q: tuple(q.x))
    best = top[0]
    best.branches = top[1:]
    return best


def _validate(p, pi, x, A, opts: SolverOptions) -> Optional[KktPoint]:
    if not p.in_box(x):
        return None
    try:
        d = p.derivatives(x[None], pi, 0, strict=True)
    except ex.ExpressionError:
        return None
    if np.any(d.g[0] < -opts.tol_feas) or np.any(np.abs(d.h[0]) > opts.tol_feas):
        return None
    try:
        mult = multipliers(p, pi, x, A, opts)
    except ConstraintQualificationError:
        return None
    lam = mult.lam
    if np.any(lam < -opts.tol_comp) or not mult.stationary:
        return None
    lam = np.maximum(lam, 0.0)
    if np.any(np.abs(lam * d.g[0]) > opts.tol_comp):
        return None
    return KktPoint(
        pi=pi.copy(),
        x=x,
        lam=lam,
        mu=mult.mu,
        active=tuple(A),
        stationarity_residual=mult.residual,
        objective=float(d.f[0]) + 0.0,
        licq_margin=mult.margin,
    )


# --------------------------------------------------------------------------
# Envelope derivatives
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Envelope:
    """Directional derivative of the value function with its per-function terms."""

    total: float
    terms: dict

    def __float__(self) -> float:
        return self.total


def _envelope_terms(names, f_pi, g_pi, h_pi, lam, mu, varpi) -> Envelope:
    varpi = np.atleast_1d(np.asarray(varpi, dtype=float))
    # "+ 0.0" normalizes negative zeros for stable reports
    terms = {names[0]: float(f_pi @ varpi) + 0.0}
    for i in range(len(lam)):
        terms[f"g{i + 1}"] = float(lam[i] * (g_pi[i] @ varpi)) + 0.0
    for j in range(len(mu)):
        terms[f"h{j + 1}"] = float(mu[j] * (h_pi[j] @ varpi)) + 0.0
    return Envelope(total=float(sum(terms.values())) + 0.0, terms=terms)


def envelope_directional(p, kkt: KktPoint, varpi) -> Envelope:
    """D2 f . varpi + sum lam_i D2 g_i . varpi + sum mu_j D2 h_j . varpi at the solution."""
    f_pi, g_pi, h_pi = p.param_derivatives(kkt.x, kkt.pi)
    return _envelope_terms(("f",), f_pi, g_pi, h_pi, kkt.lam, kkt.mu, varpi)


def envelope_gradient(p, kkt: KktPoint) -> np.ndarray:
    f_pi, g_pi, h_pi = p.param_derivatives(kkt.x, kkt.pi)
    return f_pi + kkt.lam @ g_pi + kkt.mu @ h_pi


# --------------------------------------------------------------------------
# Affine restriction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineRestriction:
    anchor: np.ndarray
    basis: np.ndarray  # (s, N) direction vectors as rows

    def __post_init__(self):
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=float))
        object.__setattr__(self, "basis", np.atleast_2d(np.asarray(self.basis, dtype=float)))
        if self.basis.shape[1] != self.anchor.shape[0]:
            raise ValueError("basis vectors and anchor must have the same dimension")
        if relative_margin(self.basis) <= SolverOptions.tol_ind:
            raise DependentVectorsError("restriction basis is linearly dependent")

    def lift(self, u) -> np.ndarray:
        """Map restricted coordinates back to the original space (same rounding as the substitution)."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        out = []
        for i in range(self.anchor.shape[0]):
            acc = None
            if self.anchor[i] != 0.0:
                acc = float(self.anchor[i])
            for c in range(self.basis.shape[0]):
                b = float(self.basis[c, i])
                if b == 0.0:
                    continue
                term = float(u[c]) if abs(b) == 1.0 else abs(b) * float(u[c])
                if acc is None:
                    acc = term if b > 0 else -term
                else:
                    acc = acc + term if b > 0 else acc - term
            out.append(0.0 if acc is None else acc)
        return np.array(out)


def _coordinate_expr(anchor: float, coeffs, unames) -> ex.Expr:
    acc: Optional[ex.Expr] = None
    if anchor != 0.0:
        acc = ex.Num(anchor) if anchor > 0 else ex.Neg(ex.Num(-anchor))
    for b, name in zip(coeffs, unames):
        if b == 0.0:
            continue
        term = ex.Var(name) if abs(b) == 1.0 else ex.Mul(ex.Num(abs(b)), ex.Var(name))
        if acc is None:
            acc = term if b > 0 else ex.Neg(term)
        else:
            acc = ex.Add(acc, term) if b > 0 else ex.Sub(acc, term)
    return acc if acc is not None else ex.Num(0.0)


@dataclass(frozen=True)
class RestrictedNLP:
    problem: ParameterizedNLP
    restriction: AffineRestriction
    identically_satisfied: tuple[str, ...]
    dropped: tuple[str, ...]

    def lift(self, u) -> np.ndarray:
        return self.restriction.lift(u)


def restrict_affine(p: ParameterizedNLP, r: AffineRestriction, drop_trivial: bool = True) -> RestrictedNLP:
    """Rewrite ``p`` in coordinates ``u`` with ``x = anchor + sum_c u_c basis_c``.

    Constraints that no longer depend on ``u`` and hold identically at the
    probe points are reported in ``identically_satisfied`` and, with
    ``drop_trivial``, removed from the restricted problem.
    """
    if r.anchor.shape[0] != p.n:
        raise ValueError(f"restriction lives in dimension {r.anchor.shape[0]}, problem in {p.n}")
    s = r.basis.shape[0]
    unames = _names("x", s)
    mapping = {
        xname: _coordinate_expr(float(r.anchor[i]), r.basis[:, i], unames)
        for i, xname in enumerate(p.x_names)
    }
    f = ex.substitute(p.f, mapping)
    g = [ex.substitute(e, mapping) for e in p.g]
    h = [ex.substitute(e, mapping) for e in p.h]

    probe = qmc.Halton(d=s + p.m, scramble=False)
    probe.fast_forward(1)
    pts = -3.0 + 6.0 * probe.random(16)
    trivial, keep_g, keep_h = [], [], []
    for label, e, is_eq in [(f"g{i + 1}", e, False) for i, e in enumerate(g)] + [
        (f"h{j + 1}", e, True) for j, e in enumerate(h)
    ]:
        flat = True
        holds = True
        for pt in pts:
            env = dict(zip(unames, pt[:s]))
            env.update(zip(p.pi_names, pt[s:]))
            try:
                v = ex.evaluate(e, env)
                gr = ex.grad(e, unames, env)
            except ex.ExpressionError:
                flat = holds = False
                break
            flat &= bool(np.all(np.abs(gr) <= 1e-12))
            holds &= abs(v) <= 1e-12 if is_eq else v >= -1e-12
        if flat and holds:
            trivial.append(label)
            if drop_trivial:
                continue
        (keep_h if is_eq else keep_g).append(e)
    box = None
    q = ParameterizedNLP(n=s, m=p.m, f=f, g=tuple(keep_g), h=tuple(keep_h), box=box, name=p.name)
    return RestrictedNLP(
        problem=q,
        restriction=r,
        identically_satisfied=tuple(trivial),
        dropped=tuple(trivial) if drop_trivial else (),
    )
