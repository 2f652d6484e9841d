from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import solve_discrete_lyapunov

from conftest import scalar_mpc
from sttmpc.errors import BrokenPreconditionError, InstabilityError
from sttmpc.geometry import Box, box_vertices
from sttmpc.params import ParamVector, split_theta
from sttmpc.tube_mpc import (ball_noise_supports, build_tube, compute_H,
                             compute_noise_supports, oracle_problem,
                             solve_lyapunov, solve_mpc, solve_with_fallback,
                             terminal_cost)


def random_stable(rng, n):
    M = rng.standard_normal((n, n))
    return M * rng.uniform(0.05, 0.98) / np.abs(np.linalg.eigvals(M)).max()


def test_lyapunov_hundred_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = rng.integers(1, 5)
        phi = random_stable(rng, n)
        L = rng.standard_normal((n, n))
        M = L @ L.T
        P = solve_lyapunov(phi, M)
        assert np.abs(P - phi.T @ P @ phi - M).max() <= 1e-8
        ref = solve_discrete_lyapunov(phi.T, M)
        np.testing.assert_allclose(P, ref, atol=1e-7 * max(1, np.abs(ref).max()))


def test_lyapunov_simple_cases():
    M = np.array([[2.0, 1.0], [1.0, 3.0]])
    np.testing.assert_allclose(solve_lyapunov(np.zeros((2, 2)), M), M)
    assert solve_lyapunov([[0.5]], [[1.0]])[0, 0] == pytest.approx(4 / 3)
    with pytest.raises(InstabilityError):
        solve_lyapunov([[1.0]], [[1.0]])


def test_lyapunov_sec5(sec5):
    phi = sec5.theta_star.phi(sec5.K)
    M = sec5.Q + sec5.K.T @ sec5.R @ sec5.K
    P = solve_lyapunov(phi, M)
    assert np.abs(P - phi.T @ P @ phi - M).max() <= 1e-8


def test_H_identity_target():
    T = np.vstack([np.eye(2), -np.eye(2)])
    np.testing.assert_allclose(compute_H(T, T), np.eye(4), atol=1e-12)


def test_H_scalar():
    T = np.array([[1.0], [-1.0]])
    np.testing.assert_allclose(compute_H(T, T * 0.5), 0.5 * np.eye(2),
                               atol=1e-12)


def test_H_identities_sec5(sec5, sec5_mpc):
    T = sec5_mpc.T
    verts = sec5.vertices()
    assert len(verts) == 64
    for theta in verts:
        phi = ParamVector(theta, 2, 1).phi(sec5.K)
        H = compute_H(T, T @ phi)
        assert np.abs(H @ T - T @ phi).max() <= 1e-7
        assert H.min() >= -1e-9
    Hc = compute_H(T, sec5.F + sec5.G @ sec5.K)
    assert np.abs(Hc @ T - (sec5.F + sec5.G @ sec5.K)).max() <= 1e-7
    assert Hc.min() >= -1e-9


def test_tube_data_identities(sec5, sec5_mpc):
    tube = build_tube(sec5.Theta0, sec5_mpc, 0.01, theta_nominal=sec5.theta0)
    T = sec5_mpc.T
    A, B = split_theta(tube.vertices, 2, 1)
    phis = A + B @ sec5.K
    assert np.abs(tube.H_list @ T - T @ phis).max() <= 1e-7
    np.testing.assert_allclose(tube.TB_list, T @ B, atol=1e-12)
    phi0 = sec5.theta0_param.phi(sec5.K)
    P = tube.P_terminal
    M = sec5.Q + sec5.K.T @ sec5.R @ sec5.K
    assert np.abs(P - phi0.T @ P @ phi0 - M).max() <= 1e-8


def test_noise_supports_no_excitation():
    T = np.vstack([np.eye(2), -np.eye(2), [[1.0, 1.0]]])
    W = Box(np.zeros(2), [0.03, 0.02])
    Theta = Box(np.zeros(6), 0.1)
    w_bar, z_bar = compute_noise_supports(T, [[1.0], [2.0]], W, Theta, 0.0)
    np.testing.assert_allclose(w_bar, [0.03, 0.02, 0.03, 0.02, 0.05])
    np.testing.assert_array_equal(z_bar, [0.0, 0.0])


def test_noise_supports_identity_template():
    r, s = 0.03, 0.2
    Theta = Box(np.array([0.6, 0.2, -0.1, 0.4, 1.0, 0.6]), 0.07)
    _, Bs = split_theta(box_vertices(Theta), 2, 1)
    B_bar = np.linalg.norm(Bs, ord=2, axis=(1, 2)).max()
    w_bar, z_bar = compute_noise_supports(np.eye(2), [[1.0], [-1.0]],
                                          Box(np.zeros(2), r), Theta, s)
    np.testing.assert_allclose(w_bar, r + B_bar * 3 * s, rtol=1e-12)
    assert np.all(z_bar >= 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_ball_supports_cover_samples(seed, sigma_t):
    rng = np.random.default_rng(seed)
    T = rng.standard_normal((5, 2))
    G = rng.standard_normal((3, 1))
    Bs = rng.standard_normal((4, 2, 1))
    TB = T @ Bs
    w_bar, z_bar = ball_noise_supports(T, G, 0.5, TB, sigma_t)
    for _ in range(200):
        j = rng.integers(4)
        w = rng.standard_normal(2)
        w *= 0.5 * rng.random() / np.linalg.norm(w)
        z = rng.uniform(-3 * sigma_t, 3 * sigma_t, 1)
        assert np.all(T @ (Bs[j] @ z + w) <= w_bar + 1e-12)
        assert np.all(G @ z <= z_bar + 1e-12)


def scalar_theta(a=0.5, b=1.0):
    return ParamVector(np.array([a, b]), 1, 1)


def test_row_count_formula():
    cfg = scalar_mpc(N=1, sigma=0.01, prune="none")
    Theta = Box(np.array([0.5, 1.0]), 0.05)
    tube = build_tube(Theta, cfg, 0.01)
    from sttmpc.tube_mpc import assemble_mpc
    qp = assemble_mpc([0.2], scalar_theta(), tube, cfg)
    m, da, dc = tube.m, cfg.d_alpha, cfg.d_c
    assert m == 4
    assert qp.A_in.shape[0] == da + m * da + dc + m * da + dc
    assert qp.n == cfg.N * cfg.d_u + (cfg.N + 1) * da


def test_origin_fixed_point():
    cfg = scalar_mpc(N=4)
    tube = build_tube(Box(np.array([0.5, 1.0]), 0.0), cfg, 0.0)
    sol = solve_mpc([0.0], scalar_theta(), tube, cfg)
    assert sol.feasible
    assert abs(sol.v0[0]) <= 1e-8
    assert sol.objective == pytest.approx(0.0, abs=1e-10)
    assert np.abs(sol.alpha_seq).max() <= 1e-6


def check_solution(sol, x_t, theta, tube, cfg, tol=1e-6):
    """Re-assert every tube MPC constraint outside the solver."""
    T = cfg.T
    v, a = sol.v_seq, sol.alpha_seq
    assert np.all(T @ x_t <= a[0] + tol)
    for k in range(cfg.N):
        for j in range(tube.m):
            assert np.all(tube.H_list[j] @ a[k] + tube.TB_list[j] @ v[k]
                          + tube.w_bar <= a[k + 1] + tol)
        assert np.all(tube.H_c @ a[k] + cfg.G @ v[k] + tube.zeta_bar
                      <= 1 + tol)
    for j in range(tube.m):
        assert np.all(tube.H_list[j] @ a[-1] + tube.w_bar <= a[-1] + tol)
    assert np.all(tube.H_c @ a[-1] + tube.zeta_bar <= 1 + tol)
    # nominal predictions follow the certainty-equivalent model
    phi, B = theta.phi(cfg.K), theta.B
    for k in range(cfg.N):
        np.testing.assert_allclose(sol.x_pred[k + 1],
                                   phi @ sol.x_pred[k] + B @ v[k], atol=1e-12)


def test_sec5_initial_problem_feasible(sec5, sec5_mpc):
    tube = build_tube(sec5.Theta0, sec5_mpc, sec5_mpc.w_bar_excitation,
                      theta_nominal=sec5.theta0)
    sol = solve_mpc(sec5.x0, sec5.theta0_param, tube, sec5_mpc)
    assert sol.feasible
    check_solution(sol, sec5.x0, sec5.theta0_param, tube, sec5_mpc)
    # the predicted states keep the tube cross-sections
    for k in range(sec5_mpc.N + 1):
        assert np.all(sec5_mpc.T @ sol.x_pred[k] <= sol.alpha_seq[k] + 1e-6)


def test_fallback_to_previous_estimate():
    cfg = scalar_mpc(N=3, sigma=0.01)
    Theta = Box(np.array([0.5, 1.0]), 0.02)
    tube = build_tube(Theta, cfg, 0.01)
    good = (scalar_theta(), tube)
    corrupt = (scalar_theta(a=3.0), tube)   # unstable closed loop
    sol, rho = solve_with_fallback([0.3], [good, corrupt], cfg)
    assert sol.feasible and rho == 0
    sol, rho = solve_with_fallback([0.3], [good, good], cfg)
    assert rho == 1
    with pytest.raises(BrokenPreconditionError):
        solve_with_fallback([0.3], [corrupt], cfg)


def test_infeasible_is_status():
    cfg = scalar_mpc(N=2)
    tube = build_tube(Box(np.array([0.5, 1.0]), 0.0), cfg, 0.0)
    sol = solve_mpc([5.0], scalar_theta(), tube, cfg)
    assert not sol.feasible


def test_oracle_origin_zero_input(sec5, sec5_mpc):
    sol = oracle_problem(np.zeros(2), sec5.theta_star, sec5_mpc)
    assert sol.feasible and abs(sol.v0[0]) <= 1e-8


def test_collapsed_set_matches_oracle(sec5, sec5_mpc):
    star = sec5.theta_star
    cfg = replace(sec5_mpc, w_bar_excitation=None)
    tube = build_tube(Box(star.theta, 0.0), cfg, 0.0, theta_nominal=star)
    for x in ([6.0, 3.0], [1.0, -0.5], [0.0, 0.2]):
        a = solve_mpc(np.array(x), star, tube, cfg)
        b = oracle_problem(np.array(x), star, sec5_mpc)
        assert a.feasible and b.feasible
        assert np.abs(a.v0 - b.v0).max() <= 1e-6


def test_terminal_cost_uses_estimate(sec5_mpc, sec5):
    P = terminal_cost(sec5.theta0_param, sec5_mpc)
    phi = sec5.theta0_param.phi(sec5.K)
    M = sec5.Q + sec5.K.T @ sec5.R @ sec5.K
    assert np.abs(P - phi.T @ P @ phi - M).max() <= 1e-8
