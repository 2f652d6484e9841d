"""Convex-set primitives: boxes, H-polytopes and contractive templates."""
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import (CapacityError, IterationLimitError, NotContractibleError,
                     TemplateUnboundedError)
from .params import closed_loop
from .solvers import OPTIMAL, UNBOUNDED, LpProblem, solve_lp

VERTEX_CAP = 12
LP_TOL = 1e-7


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``{x : |x_i - center_i| <= half_widths_i}``."""

    center: np.ndarray
    half_widths: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float)).ravel()
        h = np.atleast_1d(np.asarray(self.half_widths, dtype=float)).ravel()
        if h.size == 1 and c.size > 1:
            h = np.full(c.size, h[0])
        if c.shape != h.shape:
            raise ValueError(f"center {c.shape} and half_widths {h.shape} differ")
        if np.any(h < 0) or not np.all(np.isfinite(h)):
            raise ValueError("half_widths must be finite and non-negative")
        object.__setattr__(self, "center", _frozen(c))
        object.__setattr__(self, "half_widths", _frozen(h))

    @classmethod
    def from_bounds(cls, lower, upper):
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        return cls((lower + upper) / 2, (upper - lower) / 2)

    @property
    def dim(self):
        return self.center.size

    @property
    def lower(self):
        return self.center - self.half_widths

    @property
    def upper(self):
        return self.center + self.half_widths

    def contains(self, x, tol=0.0):
        """Membership test; ``x`` may be a batch of points (rows)."""
        x = np.asarray(x, dtype=float)
        return np.all(np.abs(x - self.center) <= self.half_widths + tol, axis=-1)

    def contains_box(self, other, tol=0.0):
        return bool(np.all(other.lower >= self.lower - tol)
                    and np.all(other.upper <= self.upper + tol))

    def to_polytope(self):
        eye = np.eye(self.dim)
        return HPolytope(np.vstack([eye, -eye]),
                         np.concatenate([self.upper, -self.lower]))

    def __eq__(self, other):
        if not isinstance(other, Box):
            return NotImplemented
        return (np.array_equal(self.center, other.center)
                and np.array_equal(self.half_widths, other.half_widths))

    def __hash__(self):
        return hash((self.center.tobytes(), self.half_widths.tobytes()))


@dataclass(frozen=True)
class HPolytope:
    """Polytope ``{x : A x <= b}``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        if A.shape[0] != b.size:
            raise ValueError(f"A has {A.shape[0]} rows but b has {b.size}")
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "b", _frozen(b))

    @property
    def dim(self):
        return self.A.shape[1]

    @property
    def n_facets(self):
        return self.A.shape[0]

    def contains(self, x, tol=0.0):
        x = np.asarray(x, dtype=float)
        return np.all(x @ self.A.T <= self.b + tol, axis=-1)

    def intersect(self, other):
        return HPolytope(np.vstack([self.A, other.A]),
                         np.concatenate([self.b, other.b]))

    def is_empty(self, tol=LP_TOL):
        res = solve_lp(LpProblem(np.zeros(self.dim), A_in=self.A, b_in=self.b),
                       tol=1e-9)
        return res.status != OPTIMAL

    def support(self, direction):
        """max direction'x over the polytope (``inf`` if unbounded)."""
        res = solve_lp(LpProblem(-np.asarray(direction, dtype=float),
                                 A_in=self.A, b_in=self.b), tol=1e-9)
        if res.status == UNBOUNDED:
            return np.inf
        if res.status != OPTIMAL:
            raise ValueError(f"support LP ended with status {res.status}")
        return -res.objective

    def is_bounded(self):
        eye = np.eye(self.dim)
        return all(np.isfinite(self.support(d)) for d in np.vstack([eye, -eye]))

    def normalized(self):
        """Rescale rows so that b = 1; requires b > 0 (origin in interior)."""
        if np.any(self.b <= 0):
            raise ValueError("origin is not in the interior of the polytope")
        return HPolytope(self.A / self.b[:, None], np.ones_like(self.b))


@dataclass(frozen=True)
class ContractiveTemplate:
    """Template ``T`` whose unit set ``{x : T x <= 1}`` is lambda-contractive."""

    T: np.ndarray
    lam: float

    def __post_init__(self):
        object.__setattr__(self, "T", _frozen(np.atleast_2d(self.T)))
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")

    @property
    def d_alpha(self):
        return self.T.shape[0]

    @property
    def d_x(self):
        return self.T.shape[1]


def box_outer_ball(center, radius):
    """Smallest axis-aligned box containing the Euclidean ball B(center, radius)."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    center = np.atleast_1d(np.asarray(center, dtype=float))
    return Box(center, np.full(center.size, float(radius)))


def _check_dims(a, b):
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")


def box_minkowski_sum(a, b):
    _check_dims(a, b)
    return Box(a.center + b.center, a.half_widths + b.half_widths)


def box_scale(a, s):
    if s < 0:
        raise ValueError("scale must be non-negative")
    return Box(s * a.center, s * a.half_widths)


def box_intersect(a, b):
    """Intersection of two boxes, or ``None`` when it is empty.

    When one box contains the other the inner one is returned unchanged.
    """
    _check_dims(a, b)
    if b.contains_box(a):
        return a
    if a.contains_box(b):
        return b
    lo = np.maximum(a.lower, b.lower)
    hi = np.minimum(a.upper, b.upper)
    if np.any(lo > hi):
        return None
    return Box.from_bounds(lo, hi)


def box_vertices(a, cap=VERTEX_CAP):
    """All 2^d corners of ``a`` as rows of an array.

    Corners are ordered lexicographically over sign patterns, ``-`` first.
    """
    if a.dim > cap:
        raise CapacityError(f"box dimension {a.dim} exceeds vertex cap {cap}")
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=a.dim)))
    return a.center + signs * a.half_widths


def support_max_rows(M, a):
    """Row-wise maximum of ``M w`` over ``w`` in box ``a`` (closed form)."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] != a.dim:
        raise ValueError(f"M has {M.shape[1]} columns, box has dimension {a.dim}")
    return M @ a.center + np.abs(M) @ a.half_widths


def _row_maxima(T, targets):
    """max{ g'x : T x <= 1 } for each row g of ``targets``."""
    out = np.empty(len(targets))
    ones = np.ones(T.shape[0])
    for i, g in enumerate(targets):
        res = solve_lp(LpProblem(-g, A_in=T, b_in=ones), tol=1e-10)
        if res.status == UNBOUNDED:
            raise TemplateUnboundedError("{x : T x <= 1} is unbounded")
        if res.status != OPTIMAL:
            raise ValueError(f"contractivity LP ended with status {res.status}")
        out[i] = -res.objective
    return out


def _vertex_dynamics(theta_vertices, K):
    K = np.atleast_2d(np.asarray(K, dtype=float))
    d_u, d_x = K.shape
    thetas = np.atleast_2d(np.asarray(theta_vertices, dtype=float))
    phis = closed_loop(thetas, K, d_x, d_u)
    # identical vertices give identical LPs
    _, keep = np.unique(phis.reshape(len(phis), -1), axis=0, return_index=True)
    return phis[np.sort(keep)]


def lambda_margins(T, phis, lam):
    """``lam - max{(T Phi_j x)_i : T x <= 1}`` for every vertex j and row i."""
    T = np.atleast_2d(np.asarray(T, dtype=float))
    return np.array([lam - _row_maxima(T, T @ phi) for phi in phis])


def is_lambda_contractive(T, theta_vertices, K, lam, tol=LP_TOL):
    """Certify ``{x : T x <= 1}`` is lambda-contractive at every vertex.

    Returns
    -------
    ok : bool
    margins : ndarray, shape (n_unique_vertices, d_alpha)
        ``lam`` minus the LP maximum of each row; ``ok`` iff all >= -tol.
    """
    phis = _vertex_dynamics(theta_vertices, K)
    margins = lambda_margins(T, phis, lam)
    return bool(np.all(margins >= -tol)), margins


def remove_redundant(p, tol=LP_TOL):
    """Drop rows of ``p`` implied by the remaining ones (one LP per row)."""
    if p.is_empty():
        raise ValueError("cannot remove redundancy from an empty polytope")
    keep = np.ones(p.n_facets, dtype=bool)
    for i in range(p.n_facets):
        others = keep.copy()
        others[i] = False
        if not others.any():
            continue
        res = solve_lp(LpProblem(-p.A[i], A_in=p.A[others], b_in=p.b[others]),
                       tol=1e-10)
        if res.status == OPTIMAL and -res.objective <= p.b[i] + tol * max(
                1.0, abs(p.b[i])):
            keep[i] = False
    return HPolytope(p.A[keep], p.b[keep])


def compute_contractive_template(theta_vertices, K, lam, seed_set, tol=LP_TOL,
                                 max_iter=100):
    """Largest lambda-contractive subset of ``seed_set`` as a template.

    Iterates ``S <- S  ∩  {x : T_S Phi_j x <= lam}`` over all vertex
    dynamics ``Phi_j = A(theta_j) + B(theta_j) K`` until no row is violated,
    pruning redundant rows after every step.

    Raises
    ------
    NotContractibleError
        If some vertex has spectral radius >= ``lam``.
    IterationLimitError
        If no fixed point is reached within ``max_iter`` sweeps.
    """
    phis = _vertex_dynamics(theta_vertices, K)
    radii = [np.abs(np.linalg.eigvals(phi)).max() for phi in phis]
    if max(radii) >= lam:
        raise NotContractibleError(
            f"vertex spectral radius {max(radii):.6g} >= lambda {lam}")
    S = remove_redundant(seed_set.normalized(), tol)
    if not S.is_bounded():
        raise TemplateUnboundedError("seed set is unbounded")
    for _ in range(max_iter):
        T = S.A
        new_rows = []
        for phi in phis:
            rows = T @ phi
            vals = _row_maxima(T, rows)
            viol = vals > lam + tol
            if viol.any():
                new_rows.append(rows[viol] / lam)
        if not new_rows:
            return ContractiveTemplate(T, lam)
        extra = np.vstack(new_rows)
        S = remove_redundant(
            HPolytope(np.vstack([T, extra]), np.ones(T.shape[0] + len(extra))),
            tol)
    raise IterationLimitError(
        f"contractive template did not converge in {max_iter} iterations")
