"""Sectioned text problem files.

Example (static)::

    [problem]
    kind = static
    n = 1
    m = 1

    [objective]
    f = "-x1^2"

    [constraints]
    h1 = "x1 - pi1"

Variational files use ``L`` instead of ``f`` and add a ``[variational]``
section with ``T``, ``a0``, ``aT`` and optionally ``N``.  Vectors are written
as JSON lists; a bare number is accepted for a one-element vector.
"""

from __future__ import annotations

import configparser
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import expr as ex
from .calcvar import VariationalProblem
from .errors import ExpressionError, ParseError, ProblemFileError
from .static_opt import ParameterizedNLP, SolverOptions

_CONSTRAINT_KEY = re.compile(r"^([gh])([1-9][0-9]*)$")
_OPTION_TYPES = {
    "tol_stat": float,
    "tol_feas": float,
    "tol_comp": float,
    "tol_act": float,
    "tol_ind": float,
    "tol_tie": float,
    "max_active": int,
    "max_iter": int,
    "max_halvings": int,
    "n_starts": int,
    "box_half_width": float,
}


@dataclass
class ProblemFile:
    kind: str
    name: str
    problem: Union[ParameterizedNLP, VariationalProblem]
    options: SolverOptions
    N: Optional[int] = None
    sources: dict = field(default_factory=dict)
    unused: tuple[str, ...] = ()

    @property
    def dims(self) -> tuple[int, int, int, int]:
        p = self.problem
        return p.n, p.m, p.k, p.l

    def summary(self) -> str:
        n, m, k, l = self.dims
        s = f"{self.kind}, n={n}, m={m}, k={k}, l={l}"
        if self.kind == "variational":
            s += f", T={self.problem.T:g}"
            if self.N is not None:
                s += f", N={self.N}"
        return s


def _unquote(s: str) -> str:
    s = s.strip()
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
        return s[1:-1]
    return s


def _require(sec, key: str, where: str) -> str:
    if sec is None or key not in sec:
        raise ProblemFileError(f"missing field {key}" + (f" in [{where}]" if where else ""))
    return _unquote(sec[key])


def _int(text: str, key: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ProblemFileError(f"field {key} must be an integer, got {text!r}") from None


def _float(text: str, key: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ProblemFileError(f"field {key} must be a number, got {text!r}") from None


def _vector(text: str, key: str, size: int) -> np.ndarray:
    try:
        v = json.loads(text)
    except json.JSONDecodeError:
        raise ProblemFileError(f"field {key} must be a number or a JSON list") from None
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.shape != (size,):
        raise ProblemFileError(f"field {key} must have {size} components, got {arr.size}")
    return arr


def _parse(label: str, text: str) -> ex.Expr:
    try:
        return ex.parse(text)
    except ParseError as exc:
        raise ProblemFileError(f"{label}: {exc}") from exc


def read_config(text: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep case: T, aT, L
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ProblemFileError(f"malformed problem file: {exc}") from exc
    return cp


def loads(text: str, name: str = "") -> ProblemFile:
    cp = read_config(text)
    if not cp.has_section("problem"):
        raise ProblemFileError("missing section [problem]")
    prob = cp["problem"]
    kind = _require(prob, "kind", "problem")
    if kind not in ("static", "variational"):
        raise ProblemFileError(f"kind must be 'static' or 'variational', got {kind!r}")
    if kind == "static" and cp.has_section("variational"):
        raise ProblemFileError("static problems must not have a [variational] section")
    n = _int(_require(prob, "n", "problem"), "n")
    m = _int(_require(prob, "m", "problem"), "m")
    if n < 1 or m < 1:
        raise ProblemFileError("n and m must be positive")
    name = _unquote(prob.get("name", name))

    obj = cp["objective"] if cp.has_section("objective") else None
    okey = "f" if kind == "static" else "L"
    sources = {okey: _require(obj, okey, "objective")}
    objective = _parse(f"objective {okey}", sources[okey])

    g: dict[int, ex.Expr] = {}
    h: dict[int, ex.Expr] = {}
    if cp.has_section("constraints"):
        for key, raw in cp["constraints"].items():
            mt = _CONSTRAINT_KEY.match(key)
            if not mt:
                raise ProblemFileError(f"unknown constraint key {key!r} (expected g1, g2, ..., h1, ...)")
            sources[key] = _unquote(raw)
            (g if mt.group(1) == "g" else h)[int(mt.group(2))] = _parse(f"constraint {key}", sources[key])
    for label, d in (("g", g), ("h", h)):
        if sorted(d) != list(range(1, len(d) + 1)):
            raise ProblemFileError(f"constraint indices for {label} must be 1..{len(d)} without gaps")
    gs = tuple(g[i] for i in sorted(g))
    hs = tuple(h[i] for i in sorted(h))
    for key, want in (("k", len(gs)), ("l", len(hs))):
        if key in prob and _int(_unquote(prob[key]), key) != want:
            raise ProblemFileError(f"declared {key}={prob[key]} but found {want} constraint(s)")

    opts = SolverOptions()
    if cp.has_section("options"):
        kw = {}
        for key, raw in cp["options"].items():
            if key not in _OPTION_TYPES:
                raise ProblemFileError(f"unknown option {key!r}")
            kw[key] = (_int if _OPTION_TYPES[key] is int else _float)(_unquote(raw), key)
        opts = opts.with_overrides(**kw)

    N = None
    try:
        if kind == "static":
            box = None
            if "box_lower" in prob or "box_upper" in prob:
                lo = _vector(_require(prob, "box_lower", "problem"), "box_lower", n)
                hi = _vector(_require(prob, "box_upper", "problem"), "box_upper", n)
                box = (lo, hi)
            problem = ParameterizedNLP(n=n, m=m, f=objective, g=gs, h=hs, box=box, name=name)
            allowed = set(problem.x_names) | set(problem.pi_names)
        else:
            var = cp["variational"] if cp.has_section("variational") else None
            if var is None:
                raise ProblemFileError("missing section [variational]")
            T = _float(_require(var, "T", ""), "T")
            a0 = _vector(_require(var, "a0", ""), "a0", n)
            aT = _vector(_require(var, "aT", ""), "aT", n)
            if "N" in var:
                N = _int(_unquote(var["N"]), "N")
                if N < 2:
                    raise ProblemFileError("N must be at least 2")
            problem = VariationalProblem(n=n, m=m, L=objective, gints=gs, hints=hs, T=T, a0=a0, aT=aT, name=name)
            allowed = set(problem.x_names) | set(problem.v_names) | set(problem.pi_names) | {"t"}
    except (ValueError, ExpressionError) as exc:
        raise ProblemFileError(str(exc)) from exc

    used = set()
    for _, e in problem.labelled():
        used |= ex.free_variables(e)
    unused = tuple(v for v in sorted(allowed - {"t"}, key=_var_order) if v not in used)
    return ProblemFile(kind=kind, name=name, problem=problem, options=opts, N=N, sources=sources, unused=unused)


def _var_order(name: str):
    mt = re.match(r"([a-z]+)(\d+)$", name)
    return (mt.group(1), int(mt.group(2))) if mt else (name, 0)


def load(path: Union[str, Path]) -> ProblemFile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ProblemFileError(f"cannot read {path}: {exc.strerror}") from exc
    return loads(text, name=path.stem)


def dumps(p: Union[ParameterizedNLP, VariationalProblem], N: Optional[int] = None) -> str:
    """Serialize a problem to the file format (round-trips through :func:`loads`)."""
    kind = "variational" if isinstance(p, VariationalProblem) else "static"
    lines = ["[problem]", f"kind = {kind}", f"n = {p.n}", f"m = {p.m}"]
    if p.name:
        lines.append(f"name = {p.name}")
    if kind == "static" and p.box is not None:
        lines.append(f"box_lower = {json.dumps([float(v) for v in p.box[0]])}")
        lines.append(f"box_upper = {json.dumps([float(v) for v in p.box[1]])}")
    labelled = list(p.labelled())
    okey = "f" if kind == "static" else "L"
    lines += ["", "[objective]", f'{okey} = "{ex.to_source(labelled[0][1])}"']
    if len(labelled) > 1:
        lines += ["", "[constraints]"]
        lines += [f'{lab} = "{ex.to_source(e)}"' for lab, e in labelled[1:]]
    if kind == "variational":
        lines += [
            "",
            "[variational]",
            f"T = {float(p.T)!r}",
            f"a0 = {json.dumps([float(v) for v in p.a0])}",
            f"aT = {json.dumps([float(v) for v in p.aT])}",
        ]
        if N is not None:
            lines.append(f"N = {N}")
    return "\n".join(lines) + "\n"
