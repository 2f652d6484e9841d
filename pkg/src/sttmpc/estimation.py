"""Least-squares identification, noise schedules and uncertainty sets."""
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ScheduleNotActiveError
from .geometry import Box, box_intersect, box_outer_ball
from .params import ParamVector, join_theta, param_distance


class RegressorHistory:
    """Running least-squares moments of ``x_{k+1} ~ [A B] y_k``.

    ``y_k`` stacks ``(x_k, u_k)``.  Only the Gram matrix ``sum y y'`` and
    the cross moment ``sum x' y'`` are kept unless ``keep_pairs`` is set, in
    which case the raw pairs are stored as well and the estimate is
    computed by a least-squares solve on the data matrix.
    """

    def __init__(self, d_x: int, d_u: int, keep_pairs: bool = False):
        self.d_x = d_x
        self.d_u = d_u
        d_y = d_x + d_u
        self.gram = np.zeros((d_y, d_y))
        self.cross = np.zeros((d_x, d_y))
        self.count = 0
        self.keep_pairs = keep_pairs
        self._y = []
        self._x_next = []

    def add(self, x, u, x_next):
        y = np.concatenate([np.ravel(x), np.ravel(u)]).astype(float)
        x_next = np.asarray(x_next, dtype=float).ravel()
        if y.size != self.d_x + self.d_u or x_next.size != self.d_x:
            raise ValueError("pair dimensions do not match the history")
        self.gram += np.outer(y, y)
        self.cross += np.outer(x_next, y)
        self.count += 1
        if self.keep_pairs:
            self._y.append(y)
            self._x_next.append(x_next)

    def __len__(self):
        return self.count


def lse_estimate(h: RegressorHistory) -> ParamVector:
    """Least-squares estimate ``(sum x' y^T)(sum y y^T)^+``.

    Raises
    ------
    ValueError
        If no pair has been recorded.
    """
    if h.count == 0:
        raise ValueError("least-squares estimate needs at least one pair")
    if h.keep_pairs:
        Y = np.array(h._y)
        X = np.array(h._x_next)
        AB = np.linalg.lstsq(Y, X, rcond=None)[0].T
    else:
        AB = h.cross @ np.linalg.pinv(h.gram, hermitian=True)
    return ParamVector(join_theta(AB[:, :h.d_x], AB[:, h.d_x:]), h.d_x, h.d_u)


@dataclass(frozen=True)
class UncertaintyState:
    """Current estimate, confidence radius and uncertainty box.

    ``t_star`` is the first integer time at which estimates are trusted,
    ``ceil(c1 + c2 log(1/delta))``.  ``violated`` records that some update
    produced an empty intersection (so the previous box was kept).
    """

    theta_t: ParamVector
    eps_t: float
    Theta_t: Box
    t_star: int
    c1: float
    c2: float
    c3: float
    delta: float
    alpha: float
    violated: bool = False

    @classmethod
    def initial(cls, theta0: ParamVector, Theta0: Box, c1=10.0, c2=5.0,
                c3=1.0, delta=0.01, alpha=0.5):
        if not 0.0 < delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if min(c1, c2, c3) <= 0.0:
            raise ValueError("c1, c2, c3 must be positive")
        return cls(theta0, math.inf, Theta0, t_star_of(c1, c2, delta),
                   c1, c2, c3, delta, alpha)


def t_star_of(c1, c2, delta):
    return max(1, math.ceil(c1 + c2 * math.log(1.0 / delta)))


def epsilon_schedule(t: int, s: UncertaintyState) -> float:
    """Confidence radius ``sqrt(c3 log(t/delta) / t^(1-alpha))``."""
    if t < s.t_star:
        raise ScheduleNotActiveError(
            f"confidence radius undefined before t_star={s.t_star} (t={t})")
    if t / s.delta <= 1.0:
        raise ValueError("confidence radius needs t/delta > 1")
    return math.sqrt(s.c3 * math.log(t / s.delta) / t ** (1.0 - s.alpha))


def sigma_schedule(t: int, sigma: float, alpha: float, d_x: int,
                   mode: str = "example") -> float:
    """Excitation standard deviation at time ``t``.

    ``"example"``: ``sqrt(2) sigma (t+1)^-alpha``;
    ``"theory"``: ``d_x^(1/4) sigma max(t,1)^(-alpha/2)``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if t < 0 or sigma < 0:
        raise ValueError("t and sigma must be non-negative")
    if mode == "example":
        return math.sqrt(2.0) * sigma * (t + 1) ** (-alpha)
    if mode == "theory":
        return d_x ** 0.25 * sigma * max(t, 1) ** (-alpha / 2.0)
    raise ValueError(f"unknown sigma mode {mode!r}")


def _truncated_gaussian(scale, dim, rng):
    # a standard draw is taken even at zero scale so streams stay aligned
    xi = rng.standard_normal(dim)
    nrm = np.linalg.norm(xi)
    if nrm > 3.0:
        xi *= 3.0 / nrm
    return scale * xi


def sample_excitation(sigma_t: float, rng: np.random.Generator, d_u: int = 1):
    """N(0, sigma_t^2 I) projected onto the ball of radius ``3 sigma_t``."""
    if sigma_t < 0:
        raise ValueError("sigma_t must be non-negative")
    return _truncated_gaussian(sigma_t, d_u, rng)


def sample_disturbance(sigma: float, rng: np.random.Generator, d_x: int = 2):
    """N(0, sigma^2 I) projected onto the ball of radius ``3 sigma``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return _truncated_gaussian(sigma, d_x, rng)


def run_streams(master_seed: int, run_index: int):
    """(disturbance, excitation) generators of one Monte-Carlo run.

    The run seed is ``master_seed XOR run_index`` (both taken modulo 2^64)
    and feeds a ``SeedSequence`` that spawns the two independent streams.
    """
    mask = (1 << 64) - 1
    seed = (int(master_seed) & mask) ^ (int(run_index) & mask)
    dist, exc = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(dist), np.random.default_rng(exc)


def update_uncertainty(s: UncertaintyState, t: int,
                       theta_hat: Optional[ParamVector]) -> UncertaintyState:
    """Advance the estimate and uncertainty box to time ``t``.

    Before ``t_star`` the state is returned unchanged.  Afterwards the
    estimate is replaced by ``theta_hat`` and the box is intersected with
    the box around ``B(theta_hat, 2 eps_t)``; an empty intersection keeps
    the previous box and sets ``violated``.
    """
    if t < 1:
        raise ValueError("updates start at t = 1")
    if t < s.t_star:
        return s
    eps = epsilon_schedule(t, s)
    delta_box = box_outer_ball(theta_hat.theta, 2.0 * eps)
    new = box_intersect(s.Theta_t, delta_box)
    if new is None:
        return replace(s, theta_t=theta_hat, eps_t=eps, violated=True)
    return replace(s, theta_t=theta_hat, eps_t=eps, Theta_t=new)


def ball_in_box(center, radius, box: Box, tol=0.0) -> bool:
    """Whether the Euclidean ball ``B(center, radius)`` lies in ``box``.

    The ball's extent along every axis is ``radius``, so inclusion holds
    iff the concentric box of half-width ``radius`` is inside.
    """
    c = np.asarray(center, dtype=float)
    return bool(np.all(np.abs(c - box.center) + radius
                       <= box.half_widths + tol))


def good_event_holds(theta_hat: ParamVector, theta_star, eps_t: float) -> bool:
    return param_distance(theta_hat.theta, np.asarray(
        getattr(theta_star, "theta", theta_star)), theta_hat.d_x,
        theta_hat.d_u) <= eps_t
