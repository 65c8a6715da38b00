"""Dense tableau simplex with Bland's anti-cycling rule.

Deliberately dependency-free and deterministic: entering variable is the
lowest-index column with negative reduced cost, the ratio test breaks ties
by lowest basis-variable index.  Problems here are desk scale (a few hundred
rows), so a dense tableau beats sparse bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InternalConsistencyError

COST_EPS = 1e-11
PIVOT_EPS = 1e-11


@dataclass
class LPResult:
    status: str  # "optimal" | "unbounded"
    objective: float
    x: np.ndarray
    iterations: int
    basis: np.ndarray
    tableau: np.ndarray | None = None


def simplex_max(A, b, c, basis0, max_iter=None, keep_tableau=False):
    """Maximize c.x over {A x = b, x >= 0} from a given identity basis.

    `A[:, basis0]` must be the identity and `b >= 0`, so the start is
    feasible; callers arrange their slack or artificial columns that way.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    m, N = A.shape
    basis = np.array(basis0, dtype=int)
    if basis.shape != (m,):
        raise InternalConsistencyError("basis size must match row count")
    if max_iter is None:
        max_iter = 2000 + 200 * (m + N)
    T = np.empty((m + 1, N + 1))
    T[:m, :N] = A
    T[:m, N] = b
    cB = c[basis]
    T[m, :N] = cB @ A - c
    T[m, N] = -(cB @ b)
    it = 0
    while True:
        negative = np.flatnonzero(T[m, :N] < -COST_EPS)
        if negative.size == 0:
            status = "optimal"
            break
        j = int(negative[0])  # Bland: lowest index enters
        col = T[:m, j]
        rows = np.flatnonzero(col > PIVOT_EPS)
        if rows.size == 0:
            status = "unbounded"
            break
        ratios = T[rows, N] / col[rows]
        best = ratios.min()
        tied = rows[ratios <= best + PIVOT_EPS * (1.0 + abs(best))]
        r = int(tied[np.argmin(basis[tied])])  # Bland: lowest variable leaves
        piv = T[r, j]
        T[r] /= piv
        colvals = T[:, j].copy()
        colvals[r] = 0.0
        T -= np.outer(colvals, T[r])
        T[:, j] = 0.0
        T[r, j] = 1.0
        basis[r] = j
        it += 1
        if it >= max_iter:
            raise InternalConsistencyError(
                f"simplex exceeded {max_iter} pivots (m={m}, N={N})"
            )
    x = np.zeros(N)
    x[basis] = T[:m, N]
    return LPResult(
        status=status,
        objective=float(-T[m, N]),
        x=x,
        iterations=it,
        basis=basis,
        tableau=T if keep_tableau else None,
    )


def equality_feasible(Aeq, d, feas_tol=None):
    """Phase-1 test for {lam >= 0 : Aeq lam = d}.

    Returns (True, lam, None) on feasibility.  On infeasibility returns
    (False, None, y) with a Farkas certificate: Aeq^T y >= 0 componentwise
    and y.d < 0.
    """
    Aeq = np.asarray(Aeq, dtype=float)
    d = np.asarray(d, dtype=float)
    m, k = Aeq.shape
    if feas_tol is None:
        feas_tol = 1e-9 * (1.0 + float(np.abs(d).sum()))
    sigma = np.where(d < 0, -1.0, 1.0)
    A = np.hstack([sigma[:, None] * Aeq, np.eye(m)])
    b = sigma * d
    c = np.concatenate([np.zeros(k), -np.ones(m)])
    basis0 = np.arange(k, k + m)
    res = simplex_max(A, b, c, basis0, keep_tableau=True)
    if res.status != "optimal":
        raise InternalConsistencyError("phase-1 problem cannot be unbounded")
    if res.objective >= -feas_tol:
        return True, res.x[:k], None
    art = res.tableau[:m, k:k + m]
    pi = c[res.basis] @ art
    y = sigma * pi
    return False, None, y
