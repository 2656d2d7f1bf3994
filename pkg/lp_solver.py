"""
Two-phase dense tableau simplex method for small linear programs.

    minimize c'x  subject to  A_ub x <= b_ub,  A_eq x = b_eq,  x >= 0

Bland's rule is used for both the entering and the leaving variable, so the
method cannot cycle; an iteration cap still guards against numerical trouble.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from errors import DimensionMismatch, Infeasible, LPNumericalFailure

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-9


@dataclass
class LPResult:
    x: np.ndarray
    objective: float
    iterations: int


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row, :] /= T[row, col]
    for r in range(T.shape[0]):
        if r != row and T[r, col] != 0.0:
            T[r, :] -= T[r, col] * T[row, :]


def _entering(d: np.ndarray, tol: float) -> int:
    # Bland: smallest index with a negative reduced cost
    idx = np.flatnonzero(d < -tol)
    return int(idx[0]) if idx.size else -1


def _leaving(T: np.ndarray, col: int, basis: List[int], tol: float) -> int:
    best, best_ratio = -1, np.inf
    for i in range(T.shape[0] - 1):
        a = T[i, col]
        if a > tol:
            ratio = T[i, -1] / a
            if ratio < best_ratio - tol or (abs(ratio - best_ratio) <= tol and basis[i] < basis[best]):
                best, best_ratio = i, ratio
    return best


def _run(T: np.ndarray, basis: List[int], tol: float, max_iter: int) -> int:
    for it in range(max_iter):
        col = _entering(T[-1, :-1], tol)
        if col == -1:
            return it
        row = _leaving(T, col, basis, tol)
        if row == -1:
            raise LPNumericalFailure("linear program is unbounded")
        _pivot(T, row, col)
        basis[row] = col
    raise LPNumericalFailure(f"simplex method did not terminate within {max_iter} pivots")


def _standard_form(
    n: int,
    A_ub: Optional[np.ndarray],
    b_ub: Optional[np.ndarray],
    A_eq: Optional[np.ndarray],
    b_eq: Optional[np.ndarray],
) -> Tuple[np.ndarray, np.ndarray]:
    """Rows [A_ub I; A_eq 0] with one slack per inequality, right-hand sides made nonnegative."""
    A_ub = np.zeros((0, n)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, dtype=float))
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float).ravel()
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    if A_ub.shape != (b_ub.size, n) or A_eq.shape != (b_eq.size, n):
        raise DimensionMismatch("constraint matrices do not match the objective and right-hand sides")
    s = b_ub.size
    A = np.vstack([np.hstack([A_ub, np.eye(s)]), np.hstack([A_eq, np.zeros((b_eq.size, s))])])
    b = np.concatenate([b_ub, b_eq])
    flip = b < 0
    A[flip] *= -1.0
    b[flip] *= -1.0
    return A, b


def solve_lp(
    c,
    A_ub=None,
    b_ub=None,
    A_eq=None,
    b_eq=None,
    tol: float = DEFAULT_TOL,
    max_iter: Optional[int] = None,
) -> LPResult:
    """
    Solve a small dense LP in minimization form.

    Phase 1 minimizes the sum of one artificial variable per row; artificials
    left in the basis at zero level are pivoted out, and rows where that is
    impossible are dropped as redundant. Phase 2 optimizes c'x from that basis.

    Args:
        c: Objective coefficients (n,)
        A_ub, b_ub: Inequality rows A_ub x <= b_ub
        A_eq, b_eq: Equality rows
        tol: Pivot and feasibility tolerance
        max_iter: Pivot cap per phase (default 50 * (rows + columns))

    Returns:
        LPResult: optimal x, objective value and the number of pivots

    Raises:
        Infeasible: the constraints admit no x >= 0
        LPNumericalFailure: unbounded problem or pivot cap exceeded
    """
    c = np.asarray(c, dtype=float).ravel()
    n = c.size
    A, b = _standard_form(n, A_ub, b_ub, A_eq, b_eq)
    m, N = A.shape
    cap = max_iter if max_iter is not None else 50 * (m + N + 1)

    # Phase 1 tableau: [A I | b] with reduced costs of the artificial objective
    T = np.zeros((m + 1, N + m + 1))
    T[:m, :N] = A
    T[:m, N : N + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :N] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = list(range(N, N + m))
    it1 = _run(T, basis, tol, cap)

    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    if -T[-1, -1] > tol * scale:
        raise Infeasible(f"constraints are infeasible (phase-1 residual {-T[-1, -1]:.3g})")

    keep = []
    for r in range(m):
        if basis[r] >= N:
            cols = np.flatnonzero(np.abs(T[r, :N]) > tol)
            if cols.size == 0:
                continue
            _pivot(T, r, int(cols[0]))
            basis[r] = int(cols[0])
        keep.append(r)
    if len(keep) < m:
        logger.debug("dropped %d redundant constraint rows", m - len(keep))

    T2 = np.zeros((len(keep) + 1, N + 1))
    T2[:-1, :N] = T[keep, :N]
    T2[:-1, -1] = T[keep, -1]
    basis2 = [basis[r] for r in keep]
    cost = np.concatenate([c, np.zeros(N - n)])
    T2[-1, :N] = cost
    for r, j in enumerate(basis2):
        if cost[j] != 0.0:
            T2[-1, :] -= cost[j] * T2[r, :]
    it2 = _run(T2, basis2, tol, cap)

    xall = np.zeros(N)
    for r, j in enumerate(basis2):
        xall[j] = T2[r, -1]
    x = np.clip(xall[:n], 0.0, None)
    return LPResult(x=x, objective=float(c @ x), iterations=it1 + it2)
