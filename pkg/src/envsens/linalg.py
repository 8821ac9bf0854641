"""Gram-Schmidt with explicit transition coefficients, and independence margins.

Vectors are the rows of 2-D arrays.  :func:`gram_schmidt` keeps the
upper-triangular coefficient matrix ``alpha`` (``alpha[i, j]`` is the weight
of input ``e_i`` in the orthogonal vector ``eps_j``) because the coordinates
of a vector in the *original* basis are recovered through it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DependentVectorsError, OutsideSpanError

TOL_IND = 1e-8
TOL_SPAN = 1e-8


def _as_rows(vectors) -> np.ndarray:
    try:
        a = np.array(vectors, dtype=float)
    except ValueError as exc:
        raise ValueError("vectors must share one dimension") from exc
    if a.size == 0 or a.ndim != 2:
        if a.ndim == 1 and a.size:
            return a[None, :]
        raise ValueError("expected a non-empty list of vectors")
    if not np.all(np.isfinite(a)):
        raise ValueError("vectors must be finite")
    return a


def independence_margin(vectors) -> float:
    """Smallest singular value of the matrix whose rows are ``vectors``.

    Positive iff the vectors are linearly independent.  Counts larger than the
    ambient dimension are reported as margin 0.
    """
    a = _as_rows(vectors)
    n, d = a.shape
    if n > d:
        return 0.0
    return float(np.linalg.svd(a, compute_uv=False)[-1])


def relative_margin(vectors) -> float:
    a = _as_rows(vectors)
    s = np.linalg.svd(a, compute_uv=False)
    if a.shape[0] > a.shape[1] or s[0] == 0.0:
        return 0.0
    return float(s[-1] / s[0])


@dataclass(frozen=True)
class GsBasis:
    e: np.ndarray  # (n, d) inputs
    eps: np.ndarray  # (n, d) pairwise orthogonal
    alpha: np.ndarray  # (n, n) upper triangular, unit diagonal

    @property
    def n(self) -> int:
        return self.e.shape[0]

    def orthogonality_defect(self) -> float:
        """Largest normalized inner product between distinct ``eps`` vectors."""
        g = self.eps @ self.eps.T
        norms = np.sqrt(np.diag(g))
        c = np.abs(g / np.outer(norms, norms))
        np.fill_diagonal(c, 0.0)
        return float(c.max()) if self.n > 1 else 0.0

    def reconstruction_defect(self) -> float:
        """max_j |eps_j - sum_i alpha[i, j] e_i|, relative to |eps_j|."""
        recon = self.alpha.T @ self.e
        err = np.linalg.norm(recon - self.eps, axis=1)
        return float(np.max(err / np.linalg.norm(self.eps, axis=1)))


def gram_schmidt(
    e: Sequence[Sequence[float]] | np.ndarray,
    tol: float = TOL_IND,
    reorthogonalize: bool = False,
) -> GsBasis:
    """Orthogonalize the rows of ``e`` in order, recording the coefficients.

    ``eps_{k+1} = e_{k+1} - sum_i c_i eps_i`` with ``c_i = (e_{k+1}|eps_i)/|eps_i|^2``
    and ``alpha[j, k+1] = -sum_i c_i alpha[j, i]`` for ``j <= k``.

    With ``reorthogonalize`` a second projection sweep is applied to each
    vector (its coefficients are folded into ``alpha`` the same way).
    """
    e = _as_rows(e)
    n, d = e.shape
    if n > d or relative_margin(e) <= tol:
        raise DependentVectorsError(
            f"input vectors are linearly dependent (relative margin <= {tol:g})"
        )
    eps = np.zeros_like(e)
    alpha = np.zeros((n, n))
    for k in range(n):
        v = e[k].copy()
        col = np.zeros(n)
        col[k] = 1.0
        for _ in range(2 if reorthogonalize else 1):
            for i in range(k):
                c = np.dot(v if reorthogonalize else e[k], eps[i]) / np.dot(eps[i], eps[i])
                v = v - c * eps[i]
                col[: i + 1] -= c * alpha[: i + 1, i]
            if not reorthogonalize:
                break
        if np.linalg.norm(v) <= tol * np.linalg.norm(e[k]):
            raise DependentVectorsError(f"vector {k + 1} lies in the span of its predecessors")
        eps[k] = v
        alpha[:, k] = col
    return GsBasis(e=e, eps=eps, alpha=alpha)


@dataclass(frozen=True)
class Coordinates:
    values: np.ndarray
    projections: np.ndarray  # y^i = (x|eps_i)/|eps_i|^2
    residual: float  # |x - sum_i y^i eps_i|


def project(x, basis: GsBasis) -> Coordinates:
    """Coordinates of the orthogonal projection of ``x`` on span(basis.e)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (basis.e.shape[1],):
        raise ValueError(f"vector of dimension {x.shape} does not match basis dimension {basis.e.shape[1]}")
    sq = np.einsum("ij,ij->i", basis.eps, basis.eps)
    y = basis.eps @ x / sq
    resid = float(np.linalg.norm(x - y @ basis.eps))
    # x = sum_j y^j eps_j = sum_i (sum_j alpha[i, j] y^j) e_i
    return Coordinates(values=basis.alpha @ y, projections=y, residual=resid)


def coordinates(x, basis: GsBasis, tol: float = TOL_SPAN) -> Coordinates:
    """Coordinates of ``x`` in the (non-orthogonal) basis ``basis.e``.

    Raises :class:`OutsideSpanError` when the projection residual exceeds
    ``tol * |x|``.
    """
    c = project(x, basis)
    scale = float(np.linalg.norm(x))
    if c.residual > tol * max(scale, np.finfo(float).tiny):
        raise OutsideSpanError(
            f"vector is outside the span of the basis (residual {c.residual:.3e})"
        )
    return c
