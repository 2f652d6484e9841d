"""Dense convex QP solver: ADMM operator splitting with polishing.

The iteration follows the standard operator-splitting scheme for

    minimize    1/2 x'Px + q'x
    subject to  l <= Ax <= u

with Ruiz equilibration, over-relaxation, adaptive step size and a final
active-set polishing step that recovers high-accuracy solutions.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .common import (INFEASIBLE, ITERATION_LIMIT, OPTIMAL, UNBOUNDED,
                     SolveStatus, as_matrix, as_vector)

_BIG = 1e20


@dataclass
class QpProblem:
    """minimize 1/2 x'Px + q'x + r  s.t.  A_eq x = b_eq,  A_in x <= b_in."""

    P: np.ndarray
    q: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None
    r: float = 0.0

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if np.abs(self.P - self.P.T).max(initial=0.0) > 1e-12 * max(
                1.0, np.abs(self.P).max(initial=0.0)):
            raise ValueError("P is not symmetric")
        self.A_eq = as_matrix(self.A_eq, n, "A_eq")
        self.b_eq = as_vector(self.b_eq, self.A_eq.shape[0], "b_eq")
        self.A_in = as_matrix(self.A_in, n, "A_in")
        self.b_in = as_vector(self.b_in, self.A_in.shape[0], "b_in")

    @property
    def n(self):
        return self.q.size

    def objective(self, x):
        return float(0.5 * x @ self.P @ x + self.q @ x + self.r)


@dataclass
class QpSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_rel: float = 0.0
    eps_pinf: float = 1e-6
    eps_dinf: float = 1e-6
    scaling_iter: int = 10
    adaptive_rho: bool = True
    adaptive_rho_tolerance: float = 5.0
    check_interval: int = 10
    polish: bool = True
    polish_trigger: float = 1e-3
    polish_delta: float = 1e-9
    polish_refine_iter: int = 5
    extra: dict = field(default_factory=dict)


def _check_psd(P):
    scale = max(1.0, float(np.abs(P).max(initial=0.0)))
    try:
        np.linalg.cholesky(P + 1e-10 * scale * np.eye(P.shape[0]))
    except np.linalg.LinAlgError:
        raise ValueError("P is not positive semidefinite") from None


class _Scaled:
    """Ruiz-equilibrated copy of the problem."""

    def __init__(self, P, q, A, l, u, iters, given=None):
        n, m = q.size, A.shape[0]
        D = np.ones(n)
        E = np.ones(m)
        c = 1.0
        if given is not None:
            D, E = np.array(given[0], float), np.array(given[1], float)
            iters = 0
            pcol = (np.abs(P) * D[None, :] * D[:, None]).max(
                axis=0, initial=0.0).mean() if n else 0.0
            gamma = max(pcol, np.abs(D * q).max(initial=0.0))
            c = 1.0 / np.clip(gamma, 1e-4, 1e4) if gamma > 0 else 1.0
        absP = np.abs(P)
        absA = np.abs(A)
        # only the scaling vectors are updated inside the loop; the scaled
        # matrices are |E A D| and c |D P D| and are formed once at the end
        for _ in range(iters):
            sP = absP * D[None, :]
            col = (sP * D[:, None]).max(axis=0, initial=0.0) * c
            if m:
                sA = absA * D[None, :]
                col = np.maximum(col, (sA * E[:, None]).max(axis=0, initial=0.0))
                row = sA.max(axis=1, initial=0.0) * E
            d = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
            d[col == 0] = 1.0
            D *= d
            if m:
                e = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
                e[row == 0] = 1.0
                E *= e
            pcol = (c * (absP * D[None, :] * D[:, None]).max(
                axis=0, initial=0.0).mean()) if n else 0.0
            gamma = max(pcol, c * np.abs(D * q).max(initial=0.0))
            gamma = 1.0 / np.clip(gamma, 1e-4, 1e4) if gamma > 0 else 1.0
            c *= gamma
        self.P = c * (D[:, None] * P * D[None, :])
        self.q = c * D * q
        self.A = E[:, None] * A * D[None, :]
        self.D, self.E, self.c = D, E, c
        self.l = np.where(np.isfinite(l), E * l, -np.inf)
        self.u = np.where(np.isfinite(u), E * u, np.inf)


def ruiz_scaling(A, n=None, iters=10):
    """Equilibration vectors ``(D, E)`` computed from constraint rows only.

    Useful for reusing one scaling across QPs that share ``A`` but differ
    in their cost; pass the result as ``scaling`` to :func:`solve_qp`.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[1] if n is None else n
    sc = _Scaled(np.zeros((n, n)), np.zeros(n), A, np.full(A.shape[0], -np.inf),
                 np.zeros(A.shape[0]), iters)
    return sc.D, sc.E


def _residuals(P, q, A, l, u, x, y):
    """Unscaled primal violation and stationarity residual."""
    Ax = A @ x
    prim = float(np.maximum(np.maximum(l - Ax, Ax - u), 0.0).max(initial=0.0))
    dual = float(np.abs(P @ x + q + A.T @ y).max(initial=0.0))
    return prim, dual


def _complementarity(A, l, u, x, y):
    Ax = A @ x
    gap_u = np.where(y > 0, y * np.where(np.isfinite(u), u - Ax, _BIG), 0.0)
    gap_l = np.where(y < 0, -y * np.where(np.isfinite(l), Ax - l, _BIG), 0.0)
    return float(np.abs(gap_u + gap_l).max(initial=0.0))


def solve_qp(p, tol=1e-8, max_iter=50_000, settings=None, x0=None, y0=None,
             scaling=None):
    """Solve a convex QP.

    Parameters
    ----------
    p : QpProblem
    tol : float
        Absolute tolerance on the unscaled primal and dual residuals.
    max_iter : int
        ADMM iteration budget.
    settings : QpSettings, optional
    x0, y0 : ndarray, optional
        Initial primal iterate and constraint multipliers (equality rows
        first, then inequality rows).
    scaling : tuple, optional
        Variable and row scaling vectors ``(D, E)`` to use instead of
        running the equilibration; ``info["scaling"]`` of an earlier solve
        with the same constraint rows is a good choice.

    Returns
    -------
    SolveStatus
        ``y`` holds the multipliers; ``info`` records the rho history
        and whether the returned point came from polishing.
    """
    s = settings or QpSettings()
    _check_psd(p.P)
    n = p.n
    A = np.vstack([p.A_eq, p.A_in])
    m = A.shape[0]
    l = np.concatenate([p.b_eq, np.full(p.A_in.shape[0], -np.inf)])
    u = np.concatenate([p.b_eq, p.b_in])

    sc = _Scaled(p.P, p.q, A, l, u, s.scaling_iter, given=scaling)
    Ps, qs, As, ls, us = sc.P, sc.q, sc.A, sc.l, sc.u
    D, E, c = sc.D, sc.E, sc.c
    is_eq = np.isclose(ls, us) & np.isfinite(ls)
    rho = s.rho
    rho_vec = np.where(is_eq, 1e3 * rho, rho)
    AtA_eq = As[is_eq].T @ As[is_eq]
    AtA_in = As[~is_eq].T @ As[~is_eq]
    eye = np.eye(n)

    def factor(rho):
        # the systems are small and dense: keep the explicit inverse so
        # each iteration costs one matrix-vector product
        c_f = linalg.cho_factor(Ps + s.sigma * eye + rho * AtA_in
                                + 1e3 * rho * AtA_eq)
        return linalg.cho_solve(c_f, eye)

    kkt = factor(rho)

    x = np.zeros(n) if x0 is None else np.asarray(x0, float) / D
    y = np.zeros(m) if y0 is None else c * np.asarray(y0, float) / E
    z = np.clip(As @ x, ls, us)

    best_fail = np.inf
    status = ITERATION_LIMIT
    out_x, out_y = None, None
    polished = False
    n_rho = 1
    it = 0
    for it in range(1, max_iter + 1):
        x_prev, y_prev = x, y
        rhs = s.sigma * x - qs + As.T @ (rho_vec * z - y)
        xt = kkt @ rhs
        zt = As @ xt
        x = s.alpha * xt + (1.0 - s.alpha) * x
        zh = s.alpha * zt + (1.0 - s.alpha) * z
        z = np.clip(zh + y / rho_vec, ls, us)
        y = y + rho_vec * (zh - z)

        if it % s.check_interval and it != max_iter:
            continue

        # unscaled residuals of the current iterate
        xu, yu = D * x, E * y / c
        Ax_s = As @ x
        prim = float(np.abs((Ax_s - z) / E).max(initial=0.0))
        Px_s = Ps @ x
        Aty_s = As.T @ y
        dual = float(np.abs((Px_s + qs + Aty_s) / D).max(initial=0.0)) / c

        if prim <= tol and dual <= tol:
            tp, td = _residuals(p.P, p.q, A, l, u, xu, yu)
            if tp <= tol and td <= tol:
                status, out_x, out_y = OPTIMAL, xu, yu
                break

        if s.polish and max(prim, dual) <= s.polish_trigger and \
                max(prim, dual) < 0.1 * best_fail:
            pol = _polish(p.P, p.q, A, l, u, sc, z, y, s)
            if pol is not None:
                px, py = pol
                tp, td = _residuals(p.P, p.q, A, l, u, px, py)
                comp = _complementarity(A, l, u, px, py)
                if tp <= tol and td <= tol and comp <= tol * max(
                        1.0, np.abs(py).max(initial=0.0)):
                    status, out_x, out_y, polished = OPTIMAL, px, py, True
                    break
            best_fail = max(prim, dual)

        dy = y - y_prev
        if m and np.abs(dy).max() > 0 and _primal_infeasible(
                As, ls, us, D, E, dy, s.eps_pinf):
            status = INFEASIBLE
            out_x, out_y = xu, dy * E / c
            break
        dx = x - x_prev
        if np.abs(dx).max() > 0 and _dual_infeasible(
                Ps, qs, As, ls, us, D, E, c, dx, s.eps_dinf):
            status = UNBOUNDED
            out_x, out_y = xu, yu
            break

        if s.adaptive_rho:
            prim_s = np.abs(Ax_s - z).max(initial=0.0) / max(
                np.abs(Ax_s).max(initial=0.0), np.abs(z).max(initial=0.0),
                1e-12)
            dual_s = np.abs(Px_s + qs + Aty_s).max(initial=0.0) / max(
                np.abs(Px_s).max(initial=0.0), np.abs(Aty_s).max(initial=0.0),
                np.abs(qs).max(initial=0.0), 1e-12)
            new_rho = rho * np.sqrt(prim_s / max(dual_s, 1e-12))
            new_rho = float(np.clip(new_rho, 1e-6, 1e6))
            if (new_rho > s.adaptive_rho_tolerance * rho
                    or new_rho < rho / s.adaptive_rho_tolerance):
                rho = new_rho
                rho_vec = np.where(is_eq, 1e3 * rho, rho)
                kkt = factor(rho)
                n_rho += 1

    if out_x is None:
        out_x, out_y = D * x, E * y / c
    prim, dual = _residuals(p.P, p.q, A, l, u, out_x, out_y)
    if status == ITERATION_LIMIT and prim <= tol and dual <= tol:
        status = OPTIMAL
    obj = p.objective(out_x) if status != INFEASIBLE else np.nan
    return SolveStatus(status, obj, out_x, primal_residual=prim,
                       dual_residual=dual, iterations=it, y=out_y,
                       info={"polished": polished, "rho_updates": n_rho,
                             "rho": rho, "scaling": (D, E)})


def _primal_infeasible(As, ls, us, D, E, dy, eps):
    norm_dy = np.abs(E * dy).max()
    if np.abs(As.T @ dy / D).max(initial=0.0) > eps * norm_dy:
        return False
    up = np.where(dy > 0, np.where(np.isfinite(us), us, _BIG) * dy, 0.0)
    lo = np.where(dy < 0, np.where(np.isfinite(ls), ls, -_BIG) * dy, 0.0)
    return float(up.sum() + lo.sum()) < -eps * norm_dy


def _dual_infeasible(Ps, qs, As, ls, us, D, E, c, dx, eps):
    norm_dx = np.abs(D * dx).max()
    if qs @ dx >= -eps * norm_dx * c:
        return False
    if np.abs(Ps @ dx / D).max(initial=0.0) > eps * norm_dx * c:
        return False
    Adx = (As @ dx) / E
    tol = eps * norm_dx
    ok_u = np.where(np.isfinite(us), Adx <= tol, True)
    ok_l = np.where(np.isfinite(ls), Adx >= -tol, True)
    return bool(np.all(ok_u & ok_l))


def _polish(P, q, A, l, u, sc, z, y, s):
    """Guess the active set from the scaled iterate and solve its KKT system."""
    ls, us = sc.l, sc.u
    low = (z - ls < -y) & np.isfinite(ls)
    upp = (us - z < y) & np.isfinite(us)
    eq = np.isclose(ls, us) & np.isfinite(ls)
    low &= ~eq
    upp &= ~eq
    act = low | upp | eq
    idx = np.flatnonzero(act)
    # work on the unscaled data restricted to the active rows
    Ar = A[idx]
    br = np.where(low[idx], l[idx], u[idx])
    n, k = P.shape[0], idx.size
    delta = s.polish_delta * max(1.0, np.abs(P).max(initial=0.0),
                                 np.abs(Ar).max(initial=0.0))
    K0 = np.zeros((n + k, n + k))
    K0[:n, :n] = P
    K0[:n, n:] = Ar.T
    K0[n:, :n] = Ar
    Kd = K0.copy()
    Kd[:n, :n] += delta * np.eye(n)
    Kd[n:, n:] -= delta * np.eye(k)
    rhs = np.concatenate([-q, br])
    try:
        lu = linalg.lu_factor(Kd, check_finite=False)
    except (linalg.LinAlgError, ValueError):
        return None
    sol = linalg.lu_solve(lu, rhs)
    for _ in range(s.polish_refine_iter):
        sol = sol + linalg.lu_solve(lu, rhs - K0 @ sol)
    if not np.all(np.isfinite(sol)):
        return None
    x = sol[:n]
    yr = sol[n:]
    # multiplier signs must match the side of the active bound
    yr = np.where(low[idx], np.minimum(yr, 0.0),
                  np.where(upp[idx], np.maximum(yr, 0.0), yr))
    yy = np.zeros(A.shape[0])
    yy[idx] = yr
    return x, yy
