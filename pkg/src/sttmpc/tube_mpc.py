"""Polytopic tube MPC: tube data, QP assembly, solving and fallback."""
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import (BrokenPreconditionError, InstabilityError,
                     TemplateInsufficientError)
from .geometry import (Box, ContractiveTemplate, box_minkowski_sum,
                       box_outer_ball, box_scale, box_vertices,
                       support_max_rows)
from .params import ParamVector, split_theta
from .solvers import (OPTIMAL, LpProblem, QpProblem, ruiz_scaling, solve_lp,
                      solve_qp)

CHECK_TOL = 1e-7


@dataclass(frozen=True)
class MpcConfig:
    """Static data of the tube MPC problem.

    The constraint set is ``{(x, u) : F x + G u <= 1}`` and ``W`` is the
    polyhedral (box) outer bound on the additive disturbance.

    ``noise_support`` selects how disturbance and excitation margins are
    bounded: ``"box"`` uses box outer approximations of the noise balls,
    ``"ball"`` the exact ball supports.  When ``w_bar_excitation`` is set,
    ``w_bar`` is evaluated at that fixed excitation level instead of the
    current one (``zeta_bar`` always tracks the current level).
    """

    N: int
    Q: np.ndarray
    R: np.ndarray
    K: np.ndarray
    F: np.ndarray
    G: np.ndarray
    template: ContractiveTemplate
    W: Box
    sigma: float
    prune: str = "hull"
    noise_support: str = "box"
    w_bar_excitation: Optional[float] = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        for name in ("Q", "R", "K", "F", "G"):
            object.__setattr__(self, name,
                               np.atleast_2d(np.asarray(getattr(self, name),
                                                        dtype=float)))
        if self.prune not in ("none", "dedupe", "hull"):
            raise ValueError(f"unknown prune mode {self.prune!r}")
        if self.noise_support not in ("box", "ball"):
            raise ValueError(f"unknown noise_support {self.noise_support!r}")
        d_x, d_u = self.d_x, self.d_u
        if self.Q.shape != (d_x, d_x) or self.R.shape != (d_u, d_u):
            raise ValueError("Q/R shapes do not match K")
        if self.F.shape[1] != d_x or self.G.shape != (self.F.shape[0], d_u):
            raise ValueError("F/G shapes do not match K")
        if self.template.d_x != d_x:
            raise ValueError("template dimension does not match K")

    @property
    def d_x(self):
        return self.K.shape[1]

    @property
    def d_u(self):
        return self.K.shape[0]

    @property
    def d_c(self):
        return self.F.shape[0]

    @property
    def T(self):
        return self.template.T

    @property
    def d_alpha(self):
        return self.template.d_alpha


@dataclass(frozen=True)
class TubeData:
    """Per-uncertainty-set tube ingredients.

    ``H_list[j] T = T Phi(theta_j)``, ``TB_list[j] = T B(theta_j)`` and
    ``H_c T = F + G K``.  ``rows`` lists, per template facet, the vertex
    indices whose tube rows are kept after pruning (all, by default).
    """

    vertices: np.ndarray
    H_list: np.ndarray
    TB_list: np.ndarray
    H_c: np.ndarray
    w_bar: np.ndarray
    zeta_bar: np.ndarray
    B_bar: float
    P_terminal: Optional[np.ndarray] = None
    rows: Optional[tuple] = None
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def m(self):
        return len(self.H_list)

    def with_noise(self, w_bar, zeta_bar):
        return replace(self, w_bar=np.asarray(w_bar, float),
                       zeta_bar=np.asarray(zeta_bar, float),
                       _cache=self._cache)

    def with_terminal(self, P):
        return replace(self, P_terminal=P, _cache=self._cache)


@dataclass
class TubeMpcSolution:
    v_seq: Optional[np.ndarray]
    alpha_seq: Optional[np.ndarray]
    x_pred: Optional[np.ndarray]
    objective: float
    status: str
    qp: object = None
    z: Optional[np.ndarray] = None

    @property
    def feasible(self):
        return self.status == "feasible"

    @property
    def v0(self):
        return self.v_seq[0]


# --------------------------------------------------------------------------
# Lyapunov equation

def solve_lyapunov(phi, M):
    """Solve ``P - phi' P phi = M`` for a Schur-stable ``phi``.

    Uses the Kronecker form ``(I - phi' (x) phi') vec(P) = vec(M)``; falls
    back to the doubling series when the linear system is ill conditioned.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    M = np.atleast_2d(np.asarray(M, dtype=float))
    n = phi.shape[0]
    if phi.shape != (n, n) or M.shape != (n, n):
        raise ValueError("phi and M must be square and of equal size")
    radius = np.abs(np.linalg.eigvals(phi)).max()
    if radius >= 1.0:
        raise InstabilityError(f"spectral radius {radius:.6g} >= 1")
    lhs = np.eye(n * n) - np.kron(phi.T, phi.T)
    try:
        P = np.linalg.solve(lhs, M.reshape(-1)).reshape(n, n)
    except np.linalg.LinAlgError:
        P = None
    if P is None or _lyap_residual(P, phi, M) > 1e-9 * max(1.0, np.abs(M).max()):
        P = _lyap_doubling(phi, M)
    return 0.5 * (P + P.T)


def _lyap_residual(P, phi, M):
    return float(np.abs(P - phi.T @ P @ phi - M).max())


def _lyap_doubling(phi, M, max_iter=200):
    # P = sum_k (phi')^k M phi^k, summed by repeated squaring
    P = M.copy()
    a = phi.copy()
    for _ in range(max_iter):
        step = a.T @ P @ a
        P = P + step
        a = a @ a
        if np.abs(step).max() <= 1e-18 * max(1.0, np.abs(P).max()):
            break
    return P


# --------------------------------------------------------------------------
# H matrices

class HSolver:
    """Row-wise ``argmin{1'h : h'T = g, h >= 0}`` through optimal bases.

    The LP's dual feasibility does not depend on ``g``: the dual feasible
    bases are the vertices of ``{y : T y <= 1}``.  They are enumerated once
    (when the number of row subsets is moderate) and scanned in a fixed
    order, so the result for a given ``g`` never depends on earlier calls.
    A target no basis covers goes through the simplex solver.
    """

    MAX_SUBSETS = 20_000

    def __init__(self, T, tol=1e-9):
        self.T = np.atleast_2d(np.asarray(T, dtype=float))
        self.tol = tol
        d_a, d_x = self.T.shape
        self._idx = np.zeros((0, d_x), dtype=int)
        self._inv = np.zeros((0, d_x, d_x))
        if math.comb(d_a, d_x) <= self.MAX_SUBSETS:
            self._enumerate()

    def _enumerate(self):
        d_x = self.T.shape[1]
        idx, inv = [], []
        for rows in itertools.combinations(range(self.T.shape[0]), d_x):
            TB = self.T[list(rows)]
            if abs(np.linalg.det(TB)) < 1e-10:
                continue
            y = np.linalg.solve(TB, np.ones(d_x))
            if np.all(self.T @ y <= 1.0 + 1e-9):
                idx.append(rows)
                inv.append(np.linalg.inv(TB.T))
        if idx:
            self._idx = np.array(idx, dtype=int)
            self._inv = np.array(inv)

    def _lp_row(self, g):
        dalpha = self.T.shape[0]
        res = solve_lp(LpProblem(np.ones(dalpha), A_eq=self.T.T, b_eq=g,
                                 lb=np.zeros(dalpha)), tol=1e-10)
        if res.status != OPTIMAL:
            raise TemplateInsufficientError(
                f"target row {g} is not in the cone of the template rows "
                f"({res.status})")
        return np.maximum(res.x, 0.0)

    def solve(self, target):
        target = np.atleast_2d(np.asarray(target, dtype=float))
        out = np.zeros((target.shape[0], self.T.shape[0]))
        todo = np.ones(target.shape[0], dtype=bool)
        if len(self._idx):
            # h_B for every (basis, target row) pair at once
            hb = np.einsum("bij,rj->rbi", self._inv, target)
            ok = np.all(hb >= -self.tol, axis=2)
            hit = ok.any(axis=1)
            first = ok.argmax(axis=1)
            rows = np.flatnonzero(hit)
            b = first[rows]
            out[rows[:, None], self._idx[b]] = np.maximum(hb[rows, b], 0.0)
            todo[rows] = False
        for r in np.flatnonzero(todo):
            out[r] = self._lp_row(target[r])
        return out

    def row(self, g):
        return self.solve(np.asarray(g, dtype=float)[None])[0]


_H_SOLVERS = {}


def _h_solver(T):
    key = (T.shape, np.ascontiguousarray(T).tobytes())
    solver = _H_SOLVERS.get(key)
    if solver is None:
        solver = _H_SOLVERS[key] = HSolver(T)
    return solver


def compute_H(T, target):
    """Non-negative ``H`` with ``H T = target`` and minimal row sums."""
    T = np.atleast_2d(np.asarray(T, dtype=float))
    return _h_solver(T).solve(target)


# --------------------------------------------------------------------------
# tube data

def max_B_norm(Theta, d_x, d_u):
    """max over the box vertices of the spectral norm of B(theta)."""
    verts = box_vertices(Theta)
    _, Bs = split_theta(verts, d_x, d_u)
    return float(np.linalg.norm(Bs, ord=2, axis=(1, 2)).max())


def compute_noise_supports(template, G, W, Theta_t, sigma_t, B_bar=None):
    """Support vectors of the tube disturbance and input excitation sets.

    ``w_bar_i = max_{w in W + B_bar Z_t} (T w)_i`` and
    ``zeta_bar_i = max_{zeta in Z_t} (G zeta)_i`` with ``Z_t`` the box
    around ``B(0, 3 sigma_t)``.
    """
    T = template.T if isinstance(template, ContractiveTemplate) else np.atleast_2d(template)
    G = np.atleast_2d(np.asarray(G, dtype=float))
    d_x, d_u = T.shape[1], G.shape[1]
    Z = box_outer_ball(np.zeros(d_u), 3.0 * sigma_t)
    if B_bar is None:
        B_bar = max_B_norm(Theta_t, d_x, d_u) if Theta_t is not None else 0.0
    # B_bar Z is a box in state space: each state coordinate is bounded by
    # B_bar times the excitation radius
    BZ = box_scale(box_outer_ball(np.zeros(d_x), 3.0 * sigma_t), B_bar)
    W_bar = box_minkowski_sum(W, BZ)
    return support_max_rows(T, W_bar), support_max_rows(G, Z)


def ball_noise_supports(T, G, w_radius, TB_list, sigma_t):
    """Exact supports of the Euclidean noise balls.

    ``w_bar_i = w_radius ||T_i|| + 3 sigma_t max_j ||(T B(theta_j))_i||`` and
    ``zeta_bar_i = 3 sigma_t ||G_i||``; both are valid whenever the
    disturbance lies in ``B(0, w_radius)`` and the excitation in
    ``B(0, 3 sigma_t)``.
    """
    T = np.atleast_2d(T)
    G = np.atleast_2d(G)
    exc = np.linalg.norm(np.asarray(TB_list), axis=2).max(axis=0)
    w_bar = w_radius * np.linalg.norm(T, axis=1) + 3.0 * sigma_t * exc
    return w_bar, 3.0 * sigma_t * np.linalg.norm(G, axis=1)


def tube_noise(cfg, tube, sigma_t):
    """(w_bar, zeta_bar) for ``tube`` under the configured support rule."""
    s_w = sigma_t if cfg.w_bar_excitation is None else cfg.w_bar_excitation
    if cfg.noise_support == "ball":
        w_bar, _ = ball_noise_supports(cfg.T, cfg.G, 3.0 * cfg.sigma,
                                       tube.TB_list, s_w)
        _, zeta_bar = ball_noise_supports(cfg.T, cfg.G, 3.0 * cfg.sigma,
                                          tube.TB_list, sigma_t)
        return w_bar, zeta_bar
    w_bar, _ = compute_noise_supports(cfg.template, cfg.G, cfg.W, None, s_w,
                                      B_bar=tube.B_bar)
    _, zeta_bar = compute_noise_supports(cfg.template, cfg.G, cfg.W, None,
                                         sigma_t, B_bar=tube.B_bar)
    return w_bar, zeta_bar


def _hull_rows(coeffs):
    """Indices of the extreme points of a point cloud (duplicates dropped)."""
    uniq, first = np.unique(np.round(coeffs, 12), axis=0, return_index=True)
    first = np.sort(first)
    pts = coeffs[first]
    if len(pts) <= 2:
        return first
    centered = pts - pts.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(svals > 1e-10 * max(1.0, svals[0])))
    if rank == 0:
        return first[:1]
    proj = centered @ vt[:rank].T
    if rank == 1:
        return first[np.unique([proj[:, 0].argmin(), proj[:, 0].argmax()])]
    if len(pts) <= rank + 1:
        return first
    try:
        hull = ConvexHull(proj)
    except QhullError:
        return first
    return first[np.sort(hull.vertices)]


def build_tube(Theta, cfg, sigma_t, theta_nominal=None):
    """Tube data for uncertainty box ``Theta`` and excitation level ``sigma_t``."""
    d_x, d_u = cfg.d_x, cfg.d_u
    T = cfg.T
    verts = box_vertices(Theta)
    if cfg.prune != "none":
        _, first = np.unique(verts, axis=0, return_index=True)
        verts = verts[np.sort(first)]
    A, Bm = split_theta(verts, d_x, d_u)
    phis = A + Bm @ cfg.K
    solver = _h_solver(T)
    H_list = np.array([solver.solve(T @ phi) for phi in phis])
    TB_list = T @ Bm
    H_c = solver.solve(cfg.F + cfg.G @ cfg.K)
    B_bar = float(np.linalg.norm(Bm, ord=2, axis=(1, 2)).max())
    rows = None
    if cfg.prune == "hull" and len(verts) > 1:
        rows = tuple(
            _hull_rows(np.hstack([H_list[:, i, :], TB_list[:, i, :]]))
            for i in range(cfg.d_alpha))
    tube = TubeData(verts, H_list, TB_list, H_c, np.zeros(cfg.d_alpha),
                    np.zeros(cfg.d_c), B_bar, rows=rows)
    tube = tube.with_noise(*tube_noise(cfg, tube, sigma_t))
    if theta_nominal is not None:
        tube = tube.with_terminal(terminal_cost(theta_nominal, cfg))
    return tube


def terminal_cost(theta, cfg):
    A, B = _matrices(theta, cfg)
    phi = A + B @ cfg.K
    return solve_lyapunov(phi, cfg.Q + cfg.K.T @ cfg.R @ cfg.K)


def _matrices(theta, cfg):
    if isinstance(theta, ParamVector):
        return theta.A, theta.B
    return split_theta(np.asarray(theta, dtype=float), cfg.d_x, cfg.d_u)


# --------------------------------------------------------------------------
# QP assembly

def _constraint_matrix(tube, cfg):
    """Constraint rows of the tube QP (independent of x_t and theta)."""
    cached = tube._cache.get("A")
    if cached is not None:
        return cached
    N, d_u, da, dc = cfg.N, cfg.d_u, cfg.d_alpha, cfg.d_c
    n_v = N * d_u
    n = n_v + (N + 1) * da

    def a_col(k):
        return n_v + k * da

    if tube.rows is None:
        sel = [(j, i) for j in range(tube.m) for i in range(da)]
    else:
        sel = [(j, i) for i in range(da) for j in tube.rows[i]]
    sel_j = np.array([s[0] for s in sel], dtype=int)
    sel_i = np.array([s[1] for s in sel], dtype=int)
    n_sel = len(sel)
    eye = np.eye(da)
    blocks = []
    kinds = []

    init = np.zeros((da, n))
    init[:, a_col(0):a_col(1)] = -eye
    blocks.append(init)
    kinds.append(("init", da))
    Hs = tube.H_list[sel_j, sel_i, :]
    TBs = tube.TB_list[sel_j, sel_i, :]
    for k in range(N):
        tub = np.zeros((n_sel, n))
        tub[:, k * d_u:(k + 1) * d_u] = TBs
        tub[:, a_col(k):a_col(k + 1)] = Hs
        tub[np.arange(n_sel), a_col(k + 1) + sel_i] -= 1.0
        blocks.append(tub)
        kinds.append(("tube", n_sel))
        inp = np.zeros((dc, n))
        inp[:, k * d_u:(k + 1) * d_u] = cfg.G
        inp[:, a_col(k):a_col(k + 1)] = tube.H_c
        blocks.append(inp)
        kinds.append(("input", dc))
    term = np.zeros((n_sel, n))
    term[:, a_col(N):a_col(N + 1)] = Hs
    term[np.arange(n_sel), a_col(N) + sel_i] -= 1.0
    blocks.append(term)
    kinds.append(("terminal", n_sel))
    termc = np.zeros((dc, n))
    termc[:, a_col(N):a_col(N + 1)] = tube.H_c
    blocks.append(termc)
    kinds.append(("terminal_c", dc))
    A = np.vstack(blocks)
    out = (A, sel_i, kinds)
    tube._cache["A"] = out
    return out


def _prediction(theta, cfg):
    """Matrices with x_k = S[k] x_t + M[k] v for k = 0..N."""
    A, B = _matrices(theta, cfg)
    phi = A + B @ cfg.K
    N, d_x, d_u = cfg.N, cfg.d_x, cfg.d_u
    S = np.empty((N + 1, d_x, d_x))
    M = np.zeros((N + 1, d_x, N * d_u))
    S[0] = np.eye(d_x)
    for k in range(N):
        S[k + 1] = phi @ S[k]
        M[k + 1] = phi @ M[k]
        M[k + 1][:, k * d_u:(k + 1) * d_u] = B
    return phi, B, S, M


def assemble_mpc(x_t, theta, tube, cfg):
    """Condensed QP for the tube MPC problem at state ``x_t``.

    Decision vector ``[v_0 .. v_{N-1}, alpha_0 .. alpha_N]``; predicted
    states are substituted out so the objective is exactly the stage plus
    terminal cost of the nominal prediction.
    """
    x_t = np.asarray(x_t, dtype=float).ravel()
    if x_t.size != cfg.d_x:
        raise ValueError(f"state has length {x_t.size}, expected {cfg.d_x}")
    if tube.H_list.shape[1:] != (cfg.d_alpha, cfg.d_alpha):
        raise ValueError("tube data does not match the template size")
    N, d_u, da = cfg.N, cfg.d_u, cfg.d_alpha
    n_v = N * d_u
    n = n_v + (N + 1) * da
    P_term = tube.P_terminal if tube.P_terminal is not None else terminal_cost(theta, cfg)
    _, _, S, M = _prediction(theta, cfg)

    H = np.kron(np.eye(N), cfg.R)
    f = np.zeros(n_v)
    r = 0.0
    for k in range(N + 1):
        W = cfg.Q if k < N else P_term
        Sx = S[k] @ x_t
        H += M[k].T @ W @ M[k]
        f += M[k].T @ W @ Sx
        r += Sx @ W @ Sx
    Pqp = np.zeros((n, n))
    Pqp[:n_v, :n_v] = 2.0 * H
    Pqp = 0.5 * (Pqp + Pqp.T)
    q = np.zeros(n)
    q[:n_v] = 2.0 * f

    A, sel_i, kinds = _constraint_matrix(tube, cfg)
    b = []
    for kind, size in kinds:
        if kind == "init":
            b.append(-(cfg.T @ x_t))
        elif kind in ("tube", "terminal"):
            b.append(-tube.w_bar[sel_i])
        else:
            b.append(1.0 - tube.zeta_bar)
    return QpProblem(Pqp, q, A_in=A, b_in=np.concatenate(b), r=r)


def _decode(z, cfg):
    n_v = cfg.N * cfg.d_u
    v = z[:n_v].reshape(cfg.N, cfg.d_u)
    alpha = z[n_v:].reshape(cfg.N + 1, cfg.d_alpha)
    return v, alpha


def solve_mpc(x_t, theta, tube, cfg, tol=1e-8, max_iter=50_000, warm=None):
    """Solve the tube MPC problem; infeasibility is a status, not an error.

    ``warm`` is an optional initial decision vector (for instance the
    shifted previous solution).
    """
    try:
        qp = assemble_mpc(x_t, theta, tube, cfg)
    except InstabilityError:
        return TubeMpcSolution(None, None, None, np.inf, "infeasible")
    scaling = tube._cache.get("scaling")
    if scaling is None:
        scaling = tube._cache["scaling"] = ruiz_scaling(qp.A_in)
    res = solve_qp(qp, tol=tol, max_iter=max_iter, x0=warm, scaling=scaling)
    if res.status != OPTIMAL:
        return TubeMpcSolution(None, None, None, np.inf, "infeasible", qp=res)
    viol = qp.A_in @ res.x - qp.b_in
    if viol.max(initial=0.0) > CHECK_TOL * max(1.0, np.abs(qp.b_in).max()):
        return TubeMpcSolution(None, None, None, np.inf, "infeasible", qp=res)
    v, alpha = _decode(res.x, cfg)
    A, B = _matrices(theta, cfg)
    phi = A + B @ cfg.K
    x_pred = np.empty((cfg.N + 1, cfg.d_x))
    x_pred[0] = x_t
    for k in range(cfg.N):
        x_pred[k + 1] = phi @ x_pred[k] + B @ v[k]
    return TubeMpcSolution(v, alpha, x_pred, res.objective, "feasible",
                           qp=res, z=res.x)


def shift_solution(sol, cfg):
    """Shifted candidate ``[v_1..v_{N-1}, 0], [alpha_1..alpha_N, alpha_N]``."""
    v = np.vstack([sol.v_seq[1:], np.zeros((1, cfg.d_u))])
    alpha = np.vstack([sol.alpha_seq[1:], sol.alpha_seq[-1:]])
    return np.concatenate([v.ravel(), alpha.ravel()])


def solve_with_fallback(x_t, history, cfg, sigma_t=None, warm=None, **kw):
    """Solve with the latest stored estimate whose problem is feasible.

    Parameters
    ----------
    history : list of (theta, TubeData)
        Entry ``tau`` holds the estimate and tube of time ``tau``; entry 0
        must come from the initial estimate and uncertainty set.
    sigma_t : float, optional
        Current excitation level; when given, each candidate tube's noise
        supports are recomputed for it.

    Returns
    -------
    (TubeMpcSolution, int)
        The solution and the index ``rho`` of the estimate used.
    """
    if not history:
        raise ValueError("estimate history is empty")
    tried = set()
    for tau in range(len(history) - 1, -1, -1):
        theta, tube = history[tau]
        key = (id(tube), np.asarray(getattr(theta, "theta", theta)).tobytes())
        if key in tried:
            continue
        tried.add(key)
        if sigma_t is not None:
            tube = tube.with_noise(*tube_noise(cfg, tube, sigma_t))
        sol = solve_mpc(x_t, theta, tube, cfg,
                        warm=warm if tau == len(history) - 1 else None, **kw)
        if sol.feasible:
            return sol, tau
    raise BrokenPreconditionError(
        "tube MPC problem infeasible for every stored estimate")


def oracle_tube(theta_star, cfg):
    """Single-vertex tube for the true parameter with ``w_bar`` from W only."""
    theta_star = np.asarray(getattr(theta_star, "theta", theta_star), float)
    key = ("oracle", theta_star.tobytes(), id(cfg))
    cached = _ORACLE_CACHE.get(key)
    if cached is not None and cached[0] is cfg:
        return cached[1]
    Theta = Box(theta_star, np.zeros_like(theta_star))
    tube = build_tube(Theta, replace(cfg, prune="dedupe",
                                     w_bar_excitation=None), 0.0,
                      theta_nominal=theta_star)
    _ORACLE_CACHE[key] = (cfg, tube)
    return tube


_ORACLE_CACHE = {}


def oracle_problem(x_t, theta_star, cfg, warm=None, **kw):
    """Tube MPC with the true parameter, no excitation margin, m = 1."""
    theta_star = np.asarray(getattr(theta_star, "theta", theta_star), float)
    tube = oracle_tube(theta_star, cfg)
    return solve_mpc(x_t, theta_star, tube, cfg, warm=warm, **kw)
