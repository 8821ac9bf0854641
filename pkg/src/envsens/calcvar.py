"""Isoperimetric variational problems and their direct transcription.

    maximize  J(x, pi) = int_0^T L(t, x, x', pi) dt
    s.t.      int_0^T g_i dt >= 0,   int_0^T h_j dt = 0,   x(0) = a0, x(T) = aT

Trajectories are piecewise linear on a uniform grid (piecewise-constant
velocity) and every integral uses the composite midpoint rule.  The free
variables of the discrete problem are the interior node values; the fixed
endpoints enter through the affine part of the trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import expr as ex
from .errors import ExpressionError
from .linalg import independence_margin
from .static_opt import Derivs, Envelope, KktPoint, SolverOptions, _envelope_terms, _names, _parse_all, solve


@dataclass(frozen=True, eq=False)
class VariationalProblem:
    n: int
    m: int
    L: ex.Expr
    gints: tuple[ex.Expr, ...]
    hints: tuple[ex.Expr, ...]
    T: float
    a0: np.ndarray
    aT: np.ndarray
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "gints", tuple(self.gints))
        object.__setattr__(self, "hints", tuple(self.hints))
        object.__setattr__(self, "a0", np.broadcast_to(np.asarray(self.a0, dtype=float), (self.n,)).copy())
        object.__setattr__(self, "aT", np.broadcast_to(np.asarray(self.aT, dtype=float), (self.n,)).copy())
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        allowed = {"t", *self.x_names, *self.v_names, *self.pi_names}
        for label, e in self.labelled():
            extra = ex.free_variables(e) - allowed
            if extra:
                raise ValueError(f"{label} references undeclared variables: {', '.join(sorted(extra))}")

    @classmethod
    def from_strings(cls, n, m, L: str, T: float, a0, aT, g: Sequence[str] = (), h: Sequence[str] = (), **kw):
        return cls(n=n, m=m, L=ex.parse(L), gints=_parse_all(g), hints=_parse_all(h), T=T, a0=a0, aT=aT, **kw)

    @property
    def k(self) -> int:
        return len(self.gints)

    @property
    def l(self) -> int:  # noqa: E743
        return len(self.hints)

    @property
    def x_names(self):
        return _names("x", self.n)

    @property
    def v_names(self):
        return _names("v", self.n)

    @property
    def pi_names(self):
        return _names("pi", self.m)

    def labelled(self):
        yield "L", self.L
        for i, e in enumerate(self.gints):
            yield f"g{i + 1}", e
        for j, e in enumerate(self.hints):
            yield f"h{j + 1}", e

    def integrand(self, psi: Union[str, ex.Expr]) -> ex.Expr:
        """Resolve a label ("L", "g1", "h2", ...), expression text or tree to a tree."""
        if isinstance(psi, str):
            for label, e in self.labelled():
                if label == psi:
                    return e
            psi = ex.parse(psi)
        extra = ex.free_variables(psi) - {"t", *self.x_names, *self.v_names, *self.pi_names}
        if extra:
            raise ValueError(f"integrand references undeclared variables: {', '.join(sorted(extra))}")
        return psi

    def straight_line(self, N: int) -> "Trajectory":
        s = np.linspace(0.0, 1.0, N + 1)[:, None]
        return Trajectory(nodes=(1 - s) * self.a0 + s * self.aT, T=self.T)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Node values at t_q = q*T/N; the velocity is constant on each segment."""

    nodes: np.ndarray  # (N+1, n)
    T: float

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        if nodes.shape[0] < 2:
            raise ValueError("a trajectory needs at least two nodes")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def from_function(cls, fn, T: float, N: int) -> "Trajectory":
        t = np.linspace(0.0, T, N + 1)
        return cls(nodes=np.asarray(fn(t), dtype=float).reshape(N + 1, -1), T=T)

    @property
    def N(self) -> int:
        return self.nodes.shape[0] - 1

    @property
    def step(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    @property
    def mid_times(self) -> np.ndarray:
        return (np.arange(self.N) + 0.5) * self.step

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.nodes[:-1] + self.nodes[1:])

    @property
    def velocities(self) -> np.ndarray:
        return np.diff(self.nodes, axis=0) / self.step

    @property
    def interior(self) -> np.ndarray:
        return self.nodes[1:-1].reshape(-1)


# --------------------------------------------------------------------------
# Local (per-segment) evaluation
# --------------------------------------------------------------------------


def _env(p: VariationalProblem, t, xm, v, pi) -> dict:
    env = {"t": t}
    for i in range(p.n):
        env[f"x{i + 1}"] = xm[..., i]
        env[f"v{i + 1}"] = v[..., i]
    env.update({name: float(val) for name, val in zip(p.pi_names, np.atleast_1d(pi))})
    return env


def _locate_domain_error(p, e, t, xm, v, pi):
    for q in range(len(t)):
        try:
            ex.evaluate(e, _env(p, t[q], xm[q], v[q], pi))
        except ExpressionError as exc:
            raise type(exc)(f"{exc} at t={t[q]:.17g}") from exc


def _local(p: VariationalProblem, e: ex.Expr, nodes: np.ndarray, T: float, pi, order: int, strict: bool):
    """Value and derivatives of ``e`` w.r.t. (x, v) at every segment midpoint.

    ``nodes`` has shape (S, N+1, n); results have leading shape (S, N).
    """
    N = nodes.shape[1] - 1
    h = T / N
    t = (np.arange(N) + 0.5) * h
    xm = 0.5 * (nodes[:, :-1] + nodes[:, 1:])
    v = np.diff(nodes, axis=1) / h
    env = _env(p, t, xm, v, pi)
    try:
        return ex.derivatives(e, env, p.x_names + p.v_names, order, strict)
    except ExpressionError:
        if strict and nodes.shape[0] == 1:
            _locate_domain_error(p, e, t, xm[0], v[0], pi)
        raise


def _as_nodes(x: Trajectory) -> np.ndarray:
    return x.nodes[None]


def functional_values(p: VariationalProblem, x: Trajectory, pi) -> tuple[float, np.ndarray, np.ndarray]:
    """Midpoint-rule values of J, G_i and H_j along ``x``."""
    out = []
    for _, e in p.labelled():
        val = _local(p, e, _as_nodes(x), x.T, pi, 0, True)[0]
        out.append(float(np.sum(val) * x.step))
    return out[0], np.array(out[1 : 1 + p.k]), np.array(out[1 + p.k :])


def _node_gradient(g: np.ndarray, n: int, h: float) -> np.ndarray:
    """Chain rule from local (x_mid, v) gradients (S, N, 2n) to all nodes (S, N+1, n)."""
    gx, gv = g[..., :n], g[..., n:]
    S, N = g.shape[:2]
    full = np.zeros((S, N + 1, n))
    full[:, :-1] += 0.5 * h * gx - gv
    full[:, 1:] += 0.5 * h * gx + gv
    return full


def _node_hessian(H: np.ndarray, n: int, h: float) -> np.ndarray:
    """h * B^T H B per segment, scattered into the (S, N+1, n, N+1, n) node Hessian."""
    S, N = H.shape[:2]
    I = np.eye(n)
    B = np.block([[0.5 * I, 0.5 * I], [-I / h, I / h]])
    Hs = h * np.einsum("ai,snab,bj->snij", B, H, B)
    full = np.zeros((S, N + 1, n, N + 1, n))
    q = np.arange(N)
    for a in (0, 1):
        for b in (0, 1):
            blk = Hs[:, :, a * n : (a + 1) * n, b * n : (b + 1) * n]  # (S, N, n, n)
            full[:, q + a, :, q + b, :] += np.transpose(blk, (1, 0, 2, 3))
    return full


def functional_gradient_state(p: VariationalProblem, x: Trajectory, pi, psi) -> np.ndarray:
    """Gradient of the discretized functional of ``psi`` w.r.t. the interior nodes (flattened)."""
    e = p.integrand(psi)
    _, g, _ = _local(p, e, _as_nodes(x), x.T, pi, 1, True)
    full = _node_gradient(g, p.n, x.step)
    return full[0, 1:-1].reshape(-1)


def functional_gradient_param(p: VariationalProblem, x: Trajectory, pi, psi) -> np.ndarray:
    """Midpoint quadrature of the parameter partials of ``psi`` along ``x``."""
    e = p.integrand(psi)
    if p.m == 0:
        return np.zeros(0)
    N, h = x.N, x.step
    env = _env(p, x.mid_times, x.midpoints, x.velocities, pi)
    pi_env = dict(env)
    for name in p.pi_names:
        pi_env[name] = np.full(N, env[name])
    _, g, _ = ex.derivatives(e, pi_env, p.pi_names, 1, True)
    return h * g.sum(axis=0)


# --------------------------------------------------------------------------
# Transcription to a static problem
# --------------------------------------------------------------------------


class DiscretizedProblem:
    """The transcribed problem over interior nodes, usable by :func:`static_opt.solve`."""

    def __init__(self, p: VariationalProblem, N: int):
        if N < 2:
            raise ValueError("need at least two segments")
        if p.k + p.l > p.n * (N - 1):
            raise ValueError("more constraints than free node values")
        self.vp = p
        self.N = N
        self.n = p.n * (N - 1)
        self.m = p.m
        self.k = p.k
        self.l = p.l
        self.box = None
        self.name = p.name

    @property
    def h_step(self) -> float:
        return self.vp.T / self.N

    @property
    def constraint_names(self):
        return _names("g", self.k) + _names("h", self.l)

    def nodes(self, Z: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(Z)
        S = Z.shape[0]
        inner = Z.reshape(S, self.N - 1, self.vp.n)
        a0 = np.broadcast_to(self.vp.a0, (S, 1, self.vp.n))
        aT = np.broadcast_to(self.vp.aT, (S, 1, self.vp.n))
        return np.concatenate([a0, inner, aT], axis=1)

    def trajectory(self, z) -> Trajectory:
        return Trajectory(nodes=self.nodes(np.asarray(z, dtype=float))[0], T=self.vp.T)

    def derivatives(self, Z: np.ndarray, pi, order: int, strict: bool = False) -> Derivs:
        nodes = self.nodes(np.asarray(Z, dtype=float))
        S, n, h = nodes.shape[0], self.vp.n, self.h_step
        vals, grads, hess = [], [], []
        for _, e in self.vp.labelled():
            val, g, H = _local(self.vp, e, nodes, self.vp.T, pi, order, strict)
            vals.append(h * val.sum(axis=1))
            if order >= 1:
                grads.append(_node_gradient(g, n, h)[:, 1:-1].reshape(S, self.n))
            if order >= 2:
                full = _node_hessian(H, n, h)[:, 1:-1, :, 1:-1, :]
                hess.append(full.reshape(S, self.n, self.n))
        k, l = self.k, self.l

        def stack(parts, shape):
            return np.stack(parts, axis=1) if parts else np.zeros((S, 0) + shape)

        d = Derivs(f=vals[0], g=stack(vals[1 : 1 + k], ()), h=stack(vals[1 + k :], ()))
        if order >= 1:
            d.df = grads[0]
            d.dg, d.dh = stack(grads[1 : 1 + k], (self.n,)), stack(grads[1 + k :], (self.n,))
        if order >= 2:
            d.d2f = hess[0]
            d.d2g = stack(hess[1 : 1 + k], (self.n, self.n))
            d.d2h = stack(hess[1 + k :], (self.n, self.n))
        return d

    def param_derivatives(self, z, pi):
        x = self.trajectory(z)
        rows = [functional_gradient_param(self.vp, x, pi, e) for _, e in self.vp.labelled()]
        rows = [np.asarray(r).reshape(self.m) for r in rows]
        return (
            rows[0],
            np.array(rows[1 : 1 + self.k]).reshape(self.k, self.m),
            np.array(rows[1 + self.k :]).reshape(self.l, self.m),
        )

    def default_starts(self, opts: SolverOptions) -> np.ndarray:
        # the affine interpolant of the endpoints plus a few smooth sine bumps
        count = opts.n_starts or 4
        base = self.vp.straight_line(self.N)
        t = base.times[1:-1] / self.vp.T
        starts = [base.interior]
        for i in range(1, count):
            mode = (i + 1) // 2
            sign = 1.0 if i % 2 else -1.0
            bump = sign * np.sin(mode * math.pi * t) / mode
            starts.append((base.nodes[1:-1] + bump[:, None]).reshape(-1))
        return np.array(starts)

    def in_box(self, x) -> bool:
        return True


@dataclass
class VariationalSolution:
    pi: np.ndarray
    N: int
    trajectory: Trajectory
    lam: np.ndarray
    mu: np.ndarray
    V: float
    kkt: KktPoint

    @property
    def active(self) -> tuple[int, ...]:
        return self.kkt.active


def solve_variational(p: VariationalProblem, pi, N: int, opts: SolverOptions = SolverOptions()) -> VariationalSolution:
    """Transcribe with ``N`` segments and solve the resulting static problem."""
    dp = DiscretizedProblem(p, N)
    kkt = solve(dp, pi, opts)
    return VariationalSolution(
        pi=kkt.pi,
        N=N,
        trajectory=dp.trajectory(kkt.x),
        lam=kkt.lam,
        mu=kkt.mu,
        V=kkt.objective,
        kkt=kkt,
    )


# --------------------------------------------------------------------------
# Diagnostics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DrResidual:
    c: np.ndarray  # best-fit constant, shape (n,)
    residual_sup: float
    residual_l2: float
    pointwise: np.ndarray  # (N, n) values of N(t) - P(t) - c at segment midpoints
    mid_times: np.ndarray


def dubois_reymond_residual(p: VariationalProblem, x: Trajectory, pi, lam, mu) -> DrResidual:
    """Residual of  D_v phi(t) = int_0^t D_x phi + c  for phi = L + sum lam g + sum mu h."""
    lam = np.asarray(lam, dtype=float).reshape(p.k)
    mu = np.asarray(mu, dtype=float).reshape(p.l)
    weights = np.concatenate([[1.0], lam, mu])
    n, h = p.n, x.step
    grad = np.zeros((x.N, 2 * n))
    for w, (_, e) in zip(weights, p.labelled()):
        if w == 0.0:
            continue
        grad += w * _local(p, e, _as_nodes(x), x.T, pi, 1, True)[1][0]
    Mx, Nv = grad[:, :n], grad[:, n:]
    # cumulative midpoint quadrature of Mx evaluated at the segment midpoints
    P = h * (np.cumsum(Mx, axis=0) - 0.5 * Mx)
    R = Nv - P
    c = R.mean(axis=0)
    r = R - c
    mag = np.linalg.norm(r, axis=1)
    return DrResidual(
        c=c,
        residual_sup=float(mag.max()),
        residual_l2=float(math.sqrt(h * np.sum(mag**2))),
        pointwise=r,
        mid_times=x.mid_times,
    )


def constraint_qualification(p: VariationalProblem, x: Trajectory, pi) -> float:
    """Smallest singular value of the row-normalized constraint state gradients.

    Returns ``inf`` for a problem without constraints (vacuously qualified).
    """
    if p.k + p.l == 0:
        return math.inf
    rows = [functional_gradient_state(p, x, pi, e) for _, e in list(p.labelled())[1:]]
    norms = [np.linalg.norm(r) for r in rows]
    if min(norms) == 0.0:
        return 0.0
    return independence_margin([r / nr for r, nr in zip(rows, norms)])


def envelope_variational(p: VariationalProblem, pi0, varpi, sol: VariationalSolution) -> Envelope:
    """int D_pi L . varpi + sum lam_i int D_pi g_i . varpi + sum mu_j int D_pi h_j . varpi."""
    x = sol.trajectory
    rows = [functional_gradient_param(p, x, pi0, e) for _, e in p.labelled()]
    g_pi = np.array(rows[1 : 1 + p.k]).reshape(p.k, p.m)
    h_pi = np.array(rows[1 + p.k :]).reshape(p.l, p.m)
    return _envelope_terms(("L",), np.asarray(rows[0]).reshape(p.m), g_pi, h_pi, sol.lam, sol.mu, varpi)


def envelope_gradient_variational(p: VariationalProblem, sol: VariationalSolution) -> np.ndarray:
    x = sol.trajectory
    rows = [functional_gradient_param(p, x, sol.pi, e) for _, e in p.labelled()]
    out = np.asarray(rows[0]).reshape(p.m).copy()
    for i in range(p.k):
        out += sol.lam[i] * rows[1 + i]
    for j in range(p.l):
        out += sol.mu[j] * rows[1 + p.k + j]
    return out
