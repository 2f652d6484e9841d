"""Closed-loop STT-MPC and oracle runs, regret and Monte-Carlo batches."""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import (BrokenPreconditionError, ConfigError,
                     CouplingViolationError)
from .estimation import (RegressorHistory, UncertaintyState, ball_in_box,
                         lse_estimate, run_streams, sample_disturbance,
                         sample_excitation, sigma_schedule, update_uncertainty)
from .geometry import Box
from .params import ParamVector
from .tube_mpc import (MpcConfig, build_tube, oracle_problem, shift_solution,
                       solve_mpc, solve_with_fallback, terminal_cost)


@dataclass(frozen=True)
class ClosedLoopConfig:
    """Everything one closed-loop run needs.

    ``Theta0`` is the initial uncertainty box around ``theta0``; ``alpha``
    sets the excitation decay and ``c1, c2, c3, delta`` the confidence
    schedule.
    """

    mpc: MpcConfig
    theta_star: ParamVector
    theta0: ParamVector
    Theta0: Box
    x0: np.ndarray
    alpha: float = 0.5
    delta: float = 0.01
    c1: float = 10.0
    c2: float = 5.0
    c3: float = 1.0
    sigma_mode: str = "example"

    def __post_init__(self):
        object.__setattr__(self, "x0",
                           np.asarray(self.x0, dtype=float).ravel())

    @property
    def sigma(self):
        return self.mpc.sigma

    def sigma_t(self, t):
        return sigma_schedule(t, self.mpc.sigma, self.alpha, self.mpc.d_x,
                              self.sigma_mode)

    def initial_state(self):
        return UncertaintyState.initial(self.theta0, self.Theta0, self.c1,
                                        self.c2, self.c3, self.delta,
                                        self.alpha)


@dataclass
class TrajectoryLog:
    """Per-step record of one closed-loop run.

    ``x`` has ``T + 1`` rows (the final state included); every other array
    has ``T`` rows.  ``eps`` is NaN before ``t_star``.  ``good`` is the
    running empirical good event (estimate within ``eps`` at every step
    since ``t_star``) and ``lemma1`` whether the ball around the true
    parameter was inside the uncertainty box at that step (``True`` where
    not evaluated).
    """

    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    zeta: np.ndarray
    w: np.ndarray
    stage_cost: np.ndarray
    rho: np.ndarray
    theta_err: np.ndarray
    feasible: np.ndarray
    eps: np.ndarray
    good: np.ndarray
    lemma1: np.ndarray
    constraint_excess: np.ndarray
    tube_excess: np.ndarray
    t_star: Optional[int] = None
    seed: Optional[int] = None
    alpha: Optional[float] = None
    box_violated: bool = False

    @property
    def T(self):
        return len(self.u)

    @classmethod
    def empty(cls, T, d_x, d_u):
        nan = np.full(T, np.nan)
        return cls(
            x=np.zeros((T + 1, d_x)), u=np.zeros((T, d_u)),
            v=np.zeros((T, d_u)), zeta=np.zeros((T, d_u)),
            w=np.zeros((T, d_x)), stage_cost=np.zeros(T),
            rho=np.arange(T), theta_err=np.zeros(T),
            feasible=np.ones(T, bool), eps=nan.copy(),
            good=np.zeros(T, bool), lemma1=np.ones(T, bool),
            constraint_excess=np.zeros(T), tube_excess=nan.copy())

    @property
    def n_violations(self):
        return int(np.sum(self.constraint_excess > 1e-9))

    @property
    def n_fallback(self):
        return int(np.sum(self.rho < np.arange(self.T)))


@dataclass
class RegretRecord:
    regret: np.ndarray
    seed: Optional[int] = None
    alpha: Optional[float] = None
    delta: Optional[float] = None


@dataclass
class MonteCarloSummary:
    """Regret statistics per excitation decay ``alpha``.

    ``mean[a]`` and ``sem[a]`` are length-``T`` arrays for ``alphas[a]``;
    ``regrets[a]`` keeps the per-run cumulative regret curves and
    ``diagnostics[a]`` per-run counters.
    """

    alphas: list
    T: int
    n_runs: int
    mean: np.ndarray
    sem: np.ndarray
    regrets: np.ndarray
    diagnostics: list = field(default_factory=list)


def step_plant(x, u, w, theta_star) -> np.ndarray:
    """``A x + B u + w`` for the true parameter."""
    theta_star = theta_star if isinstance(theta_star, ParamVector) else None
    if theta_star is None:
        raise ValueError("theta_star must be a ParamVector")
    return (theta_star.A @ np.ravel(x) + theta_star.B @ np.ravel(u)
            + np.ravel(w))


def stage_costs(x, u, Q, R):
    x = np.atleast_2d(x)
    u = np.atleast_2d(u)
    return (np.einsum("ti,ij,tj->t", x, Q, x)
            + np.einsum("ti,ij,tj->t", u, R, u))


def draw_disturbances(T, sigma, rng, d_x):
    return np.array([sample_disturbance(sigma, rng, d_x) for _ in range(T)]
                    ).reshape(T, d_x)


def _constraint_excess(mpc, x, u):
    return float(np.max(mpc.F @ x + mpc.G @ u - 1.0))


_FIRST_SOLVES = {}


def _memo_first(kind, key_parts, mpc, compute):
    # the step-0 problem is identical across runs and excitation decays;
    # it is solved once per (configuration, initial data)
    key = (kind, id(mpc)) + tuple(np.asarray(k, float).tobytes()
                                  for k in key_parts)
    hit = _FIRST_SOLVES.get(key)
    if hit is not None and hit[0] is mpc:
        return hit[1]
    value = compute()
    if len(_FIRST_SOLVES) > 64:
        _FIRST_SOLVES.clear()
    _FIRST_SOLVES[key] = (mpc, value)
    return value


def run_stt_mpc(cfg: ClosedLoopConfig, T: int, seed: int = 0,
                disturbances=None, excitation_rng=None,
                theta_override=None) -> TrajectoryLog:
    """Closed-loop STT-MPC for ``T`` steps.

    Parameters
    ----------
    cfg : ClosedLoopConfig
    T : int
        Number of applied inputs.
    seed : int
        Run seed; the disturbance and excitation streams are derived from
        it with :func:`run_streams`.
    disturbances : array, optional
        Pre-drawn ``(T, d_x)`` disturbance sequence, overriding the
        seed-derived one.
    excitation_rng : numpy Generator, optional
        Overrides the seed-derived excitation stream.
    theta_override : callable, optional
        ``theta_override(t, state)`` may return a replacement
        ``UncertaintyState``; used to pin the estimate in experiments.

    Raises
    ------
    ConfigError
        If the tube problem at ``(x0, theta0)`` is infeasible.
    BrokenPreconditionError
        If no stored estimate gives a feasible problem at some step.
    """
    mpc = cfg.mpc
    d_x, d_u = mpc.d_x, mpc.d_u
    dist_rng, exc_rng = run_streams(seed, 0)
    if excitation_rng is not None:
        exc_rng = excitation_rng
    if disturbances is None:
        disturbances = draw_disturbances(T, cfg.sigma, dist_rng, d_x)
    disturbances = np.asarray(disturbances, dtype=float).reshape(T, d_x)

    log = TrajectoryLog.empty(T, d_x, d_u)
    log.seed, log.alpha = seed, cfg.alpha
    state = cfg.initial_state()
    if theta_override is not None:
        state = theta_override(0, state) or state
    log.t_star = state.t_star
    reg = RegressorHistory(d_x, d_u)
    theta_star = cfg.theta_star

    tube = build_tube(state.Theta_t, mpc, cfg.sigma_t(0))
    entry = (state.theta_t, tube.with_terminal(terminal_cost(state.theta_t,
                                                              mpc)))
    sigma0 = cfg.sigma_t(0)
    first = _memo_first(
        "stt", (cfg.x0, state.theta_t.theta, state.Theta_t.center,
                state.Theta_t.half_widths, [sigma0]), mpc,
        lambda: _first_solve(cfg.x0, entry, mpc, sigma0))
    if first is None:
        raise ConfigError(["tube MPC problem at (x0, theta0) is infeasible"])
    history = [entry]
    x = cfg.x0.copy()
    log.x[0] = x
    warm = None
    good_so_far = True

    for t in range(T):
        if t >= 1:
            # pair (y_{t-2}, x_{t-1}) becomes available: t-1 pairs at time t
            if t >= 2:
                reg.add(log.x[t - 2], log.u[t - 2], log.x[t - 1])
            theta_hat = lse_estimate(reg) if len(reg) else state.theta_t
            old_box = state.Theta_t
            state = update_uncertainty(state, t, theta_hat)
            if theta_override is not None:
                state = theta_override(t, state) or state
            if state.violated:
                log.box_violated = True
            if state.Theta_t != old_box:
                tube._cache.clear()
                tube = build_tube(state.Theta_t, mpc, cfg.sigma_t(t))
            if state.theta_t is not history[-1][0] or tube is not history[-1][1]:
                try:
                    P = terminal_cost(state.theta_t, mpc)
                    entry = (state.theta_t, tube.with_terminal(P))
                except Exception:
                    # non-Schur estimate: leave P unset, the solve reports
                    # the problem infeasible and the fallback takes over
                    entry = (state.theta_t, tube)
            history.append(entry)

        if t >= state.t_star:
            log.eps[t] = state.eps_t
            good_so_far = good_so_far and (
                state.theta_t.distance(theta_star) <= state.eps_t)
            log.good[t] = good_so_far
            if good_so_far:
                log.lemma1[t] = ball_in_box(theta_star.theta, state.eps_t,
                                            state.Theta_t)
        log.theta_err[t] = state.theta_t.distance(theta_star)

        sigma_t = cfg.sigma_t(t)
        if t == 0:
            sol, rho = first, 0
        else:
            sol, rho = solve_with_fallback(x, history, mpc, sigma_t=sigma_t,
                                           warm=warm)
        v = sol.v0
        zeta = sample_excitation(sigma_t, exc_rng, d_u)
        u = mpc.K @ x + v + zeta
        w = disturbances[t]
        x_next = step_plant(x, u, w, theta_star)

        log.u[t], log.v[t], log.zeta[t], log.w[t] = u, v, zeta, w
        log.rho[t] = rho
        log.constraint_excess[t] = _constraint_excess(mpc, x, u)
        log.tube_excess[t] = float(np.max(mpc.T @ x_next - sol.alpha_seq[1]))
        x = x_next
        log.x[t + 1] = x
        warm = shift_solution(sol, mpc)

    log.stage_cost[:] = stage_costs(log.x[:-1], log.u, mpc.Q, mpc.R)
    return log


def _first_solve(x0, entry, mpc, sigma0):
    try:
        return solve_with_fallback(x0, [entry], mpc, sigma_t=sigma0)[0]
    except BrokenPreconditionError:
        return None


def run_oracle(cfg: ClosedLoopConfig, T: int, disturbances) -> TrajectoryLog:
    """Oracle tube MPC (true parameter, no excitation) on given disturbances."""
    mpc = cfg.mpc
    d_x, d_u = mpc.d_x, mpc.d_u
    disturbances = np.asarray(disturbances, dtype=float)
    if disturbances.shape != (T, d_x):
        raise ValueError(f"expected {T} disturbances of length {d_x}")
    log = TrajectoryLog.empty(T, d_x, d_u)
    x = cfg.x0.copy()
    log.x[0] = x
    warm = None
    for t in range(T):
        if t == 0:
            sol = _memo_first("oracle", (x, cfg.theta_star.theta), mpc,
                              lambda: oracle_problem(x, cfg.theta_star, mpc))
        else:
            sol = oracle_problem(x, cfg.theta_star, mpc, warm=warm)
        if not sol.feasible:
            if t == 0:
                raise ConfigError(
                    ["oracle tube MPC problem at x0 is infeasible"])
            raise BrokenPreconditionError(
                f"oracle tube MPC problem infeasible at t={t}")
        u = mpc.K @ x + sol.v0
        x_next = step_plant(x, u, disturbances[t], cfg.theta_star)
        log.u[t], log.v[t], log.w[t] = u, sol.v0, disturbances[t]
        log.constraint_excess[t] = _constraint_excess(mpc, x, u)
        log.tube_excess[t] = float(np.max(mpc.T @ x_next - sol.alpha_seq[1]))
        x = x_next
        log.x[t + 1] = x
        warm = shift_solution(sol, mpc)
    log.stage_cost[:] = stage_costs(log.x[:-1], log.u, mpc.Q, mpc.R)
    log.theta_err[:] = 0.0
    return log


def compute_regret(log_pi: TrajectoryLog, log_star: TrajectoryLog, Q, R,
                   seed=None, alpha=None, delta=None) -> RegretRecord:
    """Cumulative stage-cost difference of two coupled runs.

    Raises
    ------
    CouplingViolationError
        If the runs differ in length or saw different disturbances.
    """
    if log_pi.T != log_star.T:
        raise CouplingViolationError(
            f"run lengths differ ({log_pi.T} vs {log_star.T})")
    if not np.array_equal(log_pi.w, log_star.w):
        raise CouplingViolationError("runs saw different disturbances")
    Q = np.atleast_2d(Q)
    R = np.atleast_2d(R)
    c_pi = stage_costs(log_pi.x[:-1], log_pi.u, Q, R)
    c_star = stage_costs(log_star.x[:-1], log_star.u, Q, R)
    return RegretRecord(np.cumsum(c_pi - c_star), seed, alpha, delta)


def run_seed(master_seed, run_index):
    mask = (1 << 64) - 1
    return (int(master_seed) & mask) ^ (int(run_index) & mask)


def _diagnostics(log: TrajectoryLog):
    ts = log.t_star
    after = slice(ts, None)
    good_run = bool(ts < log.T and log.good[-1])
    return {
        "seed": log.seed,
        "violations": log.n_violations,
        "max_constraint_excess": float(log.constraint_excess.max()),
        "fallback_steps": log.n_fallback,
        "steps": log.T,
        "good_event": good_run,
        "lemma1_violations": int(np.sum(~log.lemma1[after] & log.good[after])),
        "theta_err_t_star": float(log.theta_err[min(ts, log.T - 1)]),
        "theta_err_final": float(log.theta_err[-1]),
        "tube_violations_good": int(np.sum(
            (log.tube_excess[after] > 1e-7) & log.good[after]
            & (log.rho[after] == np.arange(ts, log.T)))),
        "box_violated": log.box_violated,
    }


def _one_run(args):
    cfg, T, alphas, seed = args
    mpc = cfg.mpc
    dist_rng, _ = run_streams(seed, 0)
    w = draw_disturbances(T, cfg.sigma, dist_rng, mpc.d_x)
    star = run_oracle(cfg, T, w)
    out = []
    for a in alphas:
        c = replace(cfg, alpha=a)
        try:
            log = run_stt_mpc(c, T, seed, disturbances=w)
        except (ConfigError, BrokenPreconditionError) as exc:
            raise type(exc)(f"run seed {seed}, alpha {a}: {exc}") from exc
        rec = compute_regret(log, star, mpc.Q, mpc.R, seed, a, cfg.delta)
        out.append((rec.regret, _diagnostics(log), log))
    return star, out


def monte_carlo(cfg: ClosedLoopConfig, T: int, n_runs: int, alphas,
                master_seed: int, workers: int = 1, keep_logs: bool = False,
                progress=None) -> MonteCarloSummary:
    """Coupled STT-MPC versus oracle runs for every ``alpha``.

    Run ``i`` uses seed ``master_seed XOR i``; its disturbance sequence and
    oracle run are shared by all ``alpha`` values.  Results do not depend on
    ``workers``.  With ``keep_logs`` the trajectory logs are attached to
    the summary as ``summary.logs[(alpha_index, run)]`` (oracle logs under
    ``("oracle", run)``).
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    alphas = [float(a) for a in alphas]
    jobs = [(cfg, T, alphas, run_seed(master_seed, i)) for i in range(n_runs)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_one_run, jobs))
    else:
        results = []
        for i, job in enumerate(jobs):
            results.append(_one_run(job))
            if progress is not None:
                progress(i + 1, n_runs)
    regrets = np.array([[r[1][a][0] for r in results]
                        for a in range(len(alphas))])
    mean = regrets.mean(axis=1)
    if n_runs > 1:
        sem = regrets.std(axis=1, ddof=1) / np.sqrt(n_runs)
    else:
        sem = np.zeros_like(mean)
    diags = [[r[1][a][1] for r in results] for a in range(len(alphas))]
    summary = MonteCarloSummary(alphas, T, n_runs, mean, sem, regrets, diags)
    if keep_logs:
        summary.logs = {}
        for i, (star, out) in enumerate(results):
            summary.logs[("oracle", i)] = star
            for a, item in enumerate(out):
                summary.logs[(a, i)] = item[2]
    return summary
