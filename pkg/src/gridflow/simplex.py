"""Dense two-phase tableau simplex for small LPs.

Solves ``min c @ x  s.t.  A_ub @ x <= b_ub,  A_eq @ x == b_eq,  x >= 0``.
Entering columns use Dantzig's most-negative reduced cost; after a run of
degenerate pivots the solver falls back to Bland's rule, which cannot cycle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TOL = 1e-9


@dataclass(frozen=True)
class LpResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: np.ndarray | None
    objective: float
    iterations: int


DEGENERATE_RUN = 50


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    factors = T[:, col].copy()
    factors[row] = 0.0
    T -= np.outer(factors, T[row])


def _run(T: np.ndarray, basis: list, allowed: np.ndarray, max_iter: int) -> tuple[str, int]:
    """Iterate on tableau ``T`` whose last row holds reduced costs, last column the rhs."""
    m = T.shape[0] - 1
    degenerate = 0
    for it in range(max_iter):
        reduced = T[-1, :-1]
        candidates = np.nonzero((reduced < -TOL) & allowed)[0]
        if candidates.size == 0:
            return "optimal", it
        if degenerate < DEGENERATE_RUN:
            col = int(candidates[np.argmin(reduced[candidates])])
        else:
            col = int(candidates[0])
        column = T[:m, col]
        positive = column > TOL
        if not positive.any():
            return "unbounded", it
        ratios = np.full(m, np.inf)
        ratios[positive] = T[:m, -1][positive] / column[positive]
        best = ratios.min()
        ties = np.nonzero(ratios <= best + TOL * max(1.0, abs(best)))[0]
        row = int(min(ties, key=lambda r: basis[r]))
        degenerate = degenerate + 1 if best <= TOL else 0
        _pivot(T, row, col)
        basis[row] = col
    raise RuntimeError("simplex iteration limit reached")


def linprog(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, max_iter: int = 50_000) -> LpResult:
    c = np.asarray(c, dtype=float)
    n = c.size
    A_ub = np.zeros((0, n)) if A_ub is None else np.asarray(A_ub, dtype=float).reshape(-1, n)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float).reshape(-1)
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float).reshape(-1, n)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).reshape(-1)
    m_ub, m_eq = len(b_ub), len(b_eq)
    m = m_ub + m_eq

    # equality form [A | S] x' = b with slack columns for the inequality rows
    A = np.zeros((m, n + m_ub))
    A[:m_ub, :n] = A_ub
    A[:m_ub, n:] = np.eye(m_ub)
    A[m_ub:, :n] = A_eq
    b = np.concatenate([b_ub, b_eq])
    neg = b < 0
    A[neg] *= -1
    b = np.where(neg, -b, b)

    n_struct = n + m_ub
    basis = [-1] * m
    for i in range(m_ub):
        if not neg[i]:
            basis[i] = n + i
    need_art = [i for i in range(m) if basis[i] < 0]
    n_art = len(need_art)
    width = n_struct + n_art
    T = np.zeros((m + 1, width + 1))
    T[:m, :n_struct] = A
    T[:m, -1] = b
    for k, i in enumerate(need_art):
        T[i, n_struct + k] = 1.0
        basis[i] = n_struct + k

    iterations = 0
    if n_art:
        # phase 1: minimise the sum of artificials
        T[-1, n_struct:width] = 1.0
        for i in need_art:
            T[-1] -= T[i]
        status, it = _run(T, basis, np.ones(width, dtype=bool), max_iter)
        iterations += it
        if -T[-1, -1] > 1e-7 * max(1.0, np.abs(b).max(initial=0.0)):
            return LpResult("infeasible", None, float("nan"), iterations)
        # drive remaining artificials out of the basis; drop redundant rows
        keep = []
        for r in range(m):
            if basis[r] >= n_struct:
                cols = np.nonzero(np.abs(T[r, :n_struct]) > 1e-9)[0]
                if cols.size:
                    _pivot(T, r, int(cols[0]))
                    basis[r] = int(cols[0])
                    keep.append(r)
            else:
                keep.append(r)
        T = np.vstack([T[keep], T[-1:]])
        basis = [basis[r] for r in keep]
        m = len(keep)

    # phase 2 objective in terms of the current basis
    T[-1] = 0.0
    T[-1, :n] = c
    for r, j in enumerate(basis):
        if T[-1, j] != 0.0:
            T[-1] -= T[-1, j] * T[r]
    allowed = np.zeros(T.shape[1] - 1, dtype=bool)
    allowed[:n_struct] = True
    status, it = _run(T, basis, allowed, max_iter)
    iterations += it
    if status == "unbounded":
        return LpResult("unbounded", None, float("-inf"), iterations)
    x = np.zeros(T.shape[1] - 1)
    for r, j in enumerate(basis):
        x[j] = T[r, -1]
    x = x[:n]
    return LpResult("optimal", x, float(c @ x), iterations)
