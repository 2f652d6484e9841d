"""Dense two-phase simplex method with Bland's anti-cycling rule."""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .common import (INFEASIBLE, ITERATION_LIMIT, OPTIMAL, UNBOUNDED,
                     SolveStatus, as_matrix, as_vector)


@dataclass
class LpProblem:
    """minimize c'x  s.t.  A_eq x = b_eq,  A_in x <= b_in,  lb <= x <= ub.

    Missing blocks are empty.  Bounds default to a free variable
    (``-inf``/``+inf``); either side may be infinite per component.
    """

    c: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.A_eq = as_matrix(self.A_eq, n, "A_eq")
        self.b_eq = as_vector(self.b_eq, self.A_eq.shape[0], "b_eq")
        self.A_in = as_matrix(self.A_in, n, "A_in")
        self.b_in = as_vector(self.b_in, self.A_in.shape[0], "b_in")
        self.lb = (np.full(n, -np.inf) if self.lb is None
                   else as_vector(np.broadcast_to(self.lb, (n,)), n, "lb"))
        self.ub = (np.full(n, np.inf) if self.ub is None
                   else as_vector(np.broadcast_to(self.ub, (n,)), n, "ub"))
        if np.any(self.lb > self.ub):
            raise ValueError("lb > ub for some variable")

    @property
    def n(self):
        return self.c.size


def _to_standard_form(p):
    """Rewrite ``p`` as  min c's  s.t.  M s = r, s >= 0.

    Returns the standard-form data together with the affine map
    ``x = offset + S @ s[:n_struct]`` back to the original variables and
    the index of each row's +1 slack column (or -1).
    """
    n = p.n
    cols = []        # (original var, sign) for each structural column
    offset = np.zeros(n)
    ub_rows = []     # (column, width) for doubly bounded variables
    for j in range(n):
        lo, hi = p.lb[j], p.ub[j]
        if np.isfinite(lo):
            offset[j] = lo
            cols.append((j, 1.0))
            if np.isfinite(hi):
                ub_rows.append((len(cols) - 1, hi - lo))
        elif np.isfinite(hi):
            offset[j] = hi
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    n_s = len(cols)
    S = np.zeros((n, n_s))
    for k, (j, sgn) in enumerate(cols):
        S[j, k] = sgn

    m_eq, m_in, m_ub = p.A_eq.shape[0], p.A_in.shape[0], len(ub_rows)
    m = m_eq + m_in + m_ub
    n_slack = m_in + m_ub
    M = np.zeros((m, n_s + n_slack))
    r = np.zeros(m)
    M[:m_eq, :n_s] = p.A_eq @ S
    r[:m_eq] = p.b_eq - p.A_eq @ offset
    M[m_eq:m_eq + m_in, :n_s] = p.A_in @ S
    r[m_eq:m_eq + m_in] = p.b_in - p.A_in @ offset
    for k, (col, width) in enumerate(ub_rows):
        M[m_eq + m_in + k, col] = 1.0
        r[m_eq + m_in + k] = width
    slack_of_row = np.full(m, -1)
    for k in range(n_slack):
        row = m_eq + k
        M[row, n_s + k] = 1.0
        slack_of_row[row] = n_s + k
    cost = np.concatenate([S.T @ p.c, np.zeros(n_slack)])
    return M, r, cost, S, offset, slack_of_row


def _pivot(tab, row, col):
    tab[row] /= tab[row, col]
    colv = tab[:, col].copy()
    colv[row] = 0.0
    tab -= np.outer(colv, tab[row])


def _run_simplex(tab, basis, cost, n_cols, tol, budget):
    """Primal simplex on tableau ``tab`` (last column = rhs), Bland's rule.

    Returns (outcome, pivots) with outcome in {OPTIMAL, UNBOUNDED,
    ITERATION_LIMIT}.
    """
    pivots = 0
    while True:
        reduced = cost[:n_cols] - cost[basis] @ tab[:, :n_cols]
        candidates = np.flatnonzero(reduced < -tol)
        if candidates.size == 0:
            return OPTIMAL, pivots
        if pivots >= budget:
            return ITERATION_LIMIT, pivots
        col = candidates[0]
        column = tab[:, col]
        pos = np.flatnonzero(column > tol)
        if pos.size == 0:
            return UNBOUNDED, pivots
        ratios = tab[pos, -1] / column[pos]
        best = ratios.min()
        ties = pos[ratios <= best + tol * max(1.0, abs(best))]
        row = ties[np.argmin(basis[ties])]
        _pivot(tab, row, col)
        basis[row] = col
        pivots += 1


def solve_lp(p, tol=1e-9, max_iter=None):
    """Solve a dense LP with the two-phase simplex method.

    Parameters
    ----------
    p : LpProblem
    tol : float
        Pivot, optimality and feasibility tolerance.
    max_iter : int, optional
        Pivot budget shared by both phases; defaults to
        ``10 * (rows + cols)`` of the standard form.

    Returns
    -------
    SolveStatus
    """
    M, r, cost, S, offset, slack_of_row = _to_standard_form(p)
    m, n_cols = M.shape
    if max_iter is None:
        max_iter = 10 * (m + n_cols)

    flip = r < 0
    M[flip] *= -1.0
    r[flip] *= -1.0
    slack_of_row[flip] = -1

    need_art = np.flatnonzero(slack_of_row < 0)
    n_art = need_art.size
    tab = np.zeros((m, n_cols + n_art + 1))
    tab[:, :n_cols] = M
    tab[:, -1] = r
    basis = slack_of_row.copy()
    for k, row in enumerate(need_art):
        tab[row, n_cols + k] = 1.0
        basis[row] = n_cols + k

    pivots = 0
    scale = max(1.0, float(np.abs(r).max(initial=0.0)))
    if n_art:
        phase1_cost = np.concatenate([np.zeros(n_cols), np.ones(n_art), [0.0]])
        outcome, used = _run_simplex(tab, basis, phase1_cost,
                                     n_cols + n_art, tol, max_iter)
        pivots += used
        if outcome == ITERATION_LIMIT:
            return SolveStatus(ITERATION_LIMIT, np.nan, None, iterations=pivots)
        infeas = float(tab[basis >= n_cols, -1].sum())
        if infeas > tol * scale * 10:
            return SolveStatus(INFEASIBLE, np.nan, None, iterations=pivots,
                               info={"phase1_objective": infeas})
        # drive zero-level artificials out of the basis, dropping redundant rows
        keep = np.ones(m, dtype=bool)
        for row in np.flatnonzero(basis >= n_cols):
            nz = np.flatnonzero(np.abs(tab[row, :n_cols]) > tol)
            if nz.size:
                _pivot(tab, row, nz[0])
                basis[row] = nz[0]
            else:
                keep[row] = False
        tab = np.delete(tab[keep], np.s_[n_cols:n_cols + n_art], axis=1)
        basis = basis[keep]
        M = M[keep]
        r = r[keep]

    cost_ext = np.concatenate([cost, [0.0]])
    outcome, used = _run_simplex(tab, basis, cost_ext, n_cols, tol,
                                 max(max_iter - pivots, 0))
    pivots += used
    if outcome != OPTIMAL:
        return SolveStatus(outcome, -np.inf if outcome == UNBOUNDED else np.nan,
                           None, iterations=pivots)

    # re-solve the basic system on the original data to shed pivot round-off
    s = np.zeros(n_cols)
    if basis.size:
        B = M[:, basis]
        try:
            s[basis] = np.linalg.solve(B, r)
        except np.linalg.LinAlgError:
            s[basis] = tab[:, -1]
        if np.any(s[basis] < -1e3 * tol * scale):
            s[basis] = tab[:, -1]
    s = np.maximum(s, 0.0)
    x = offset + S @ s[:S.shape[1]]

    reduced = cost - cost[basis] @ tab[:, :n_cols]
    dual_res = float(max(0.0, -reduced.min(initial=0.0)))
    return SolveStatus(OPTIMAL, float(p.c @ x), x,
                       primal_residual=lp_primal_residual(p, x),
                       dual_residual=dual_res, iterations=pivots)


def lp_primal_residual(p, x):
    """Largest violation of any constraint or bound of ``p`` at ``x``."""
    res = [0.0]
    if p.A_eq.shape[0]:
        res.append(np.abs(p.A_eq @ x - p.b_eq).max())
    if p.A_in.shape[0]:
        res.append((p.A_in @ x - p.b_in).max())
    res.append((p.lb - x).max(initial=-np.inf))
    res.append((x - p.ub).max(initial=-np.inf))
    return float(max(0.0, max(res)))
