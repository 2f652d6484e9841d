import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SEC5_A, SEC5_B, SEC5_K, SEC5_THETA0, SEC5_X0
from sttmpc.errors import ScheduleNotActiveError
from sttmpc.estimation import (RegressorHistory, UncertaintyState,
                               ball_in_box, epsilon_schedule, good_event_holds,
                               lse_estimate, run_streams, sample_disturbance,
                               sample_excitation, sigma_schedule, t_star_of,
                               update_uncertainty)
from sttmpc.geometry import Box
from sttmpc.params import ParamVector, join_theta, param_distance, split_theta


def test_theta_layout_round_trip():
    theta = join_theta(SEC5_A, SEC5_B)
    np.testing.assert_array_equal(theta, [0.6, 0.2, -0.1, 0.4, 1.0, 0.6])
    A, B = split_theta(theta, 2, 1)
    np.testing.assert_array_equal(A, SEC5_A)
    np.testing.assert_array_equal(B, SEC5_B)


def test_param_distance_is_max_of_block_norms():
    t1 = join_theta(SEC5_A, SEC5_B)
    t2 = join_theta(SEC5_A + 0.3, SEC5_B - 0.1)
    assert param_distance(t1, t2, 2, 1) == pytest.approx(
        max(0.3 * 2, 0.1 * math.sqrt(2)))


def test_lse_noiseless_recovery():
    theta_star = ParamVector.from_matrices(SEC5_A, SEC5_B)
    rng = np.random.default_rng(11)
    h = RegressorHistory(2, 1)
    x = SEC5_X0.copy()
    for _ in range(50):
        u = SEC5_K @ x + rng.standard_normal(1)
        x_next = SEC5_A @ x + SEC5_B @ u
        h.add(x, u, x_next)
        x = x_next
    est = lse_estimate(h)
    assert est.distance(theta_star) <= 1e-8


def test_lse_single_pair():
    h = RegressorHistory(2, 1)
    x_next = np.array([3.0, -4.0])
    h.add([1.0, 0.0], [0.0], x_next)
    A, B = split_theta(lse_estimate(h).theta, 2, 1)
    np.testing.assert_allclose(A[:, 0], x_next, atol=1e-14)
    np.testing.assert_allclose(A[:, 1], 0.0, atol=1e-14)
    np.testing.assert_allclose(B, 0.0, atol=1e-14)


def test_lse_singular_gram_is_zero():
    h = RegressorHistory(2, 1)
    for _ in range(3):
        h.add(np.zeros(2), np.zeros(1), np.zeros(2))
    np.testing.assert_array_equal(lse_estimate(h).theta, np.zeros(6))


def test_lse_empty():
    with pytest.raises(ValueError):
        lse_estimate(RegressorHistory(2, 1))


def test_lse_pair_mode_agrees():
    rng = np.random.default_rng(2)
    a, b = RegressorHistory(2, 1), RegressorHistory(2, 1, keep_pairs=True)
    for _ in range(20):
        x, u, xn = rng.standard_normal(2), rng.standard_normal(1), rng.standard_normal(2)
        a.add(x, u, xn)
        b.add(x, u, xn)
    np.testing.assert_allclose(lse_estimate(a).theta, lse_estimate(b).theta,
                               atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 15))
def test_gram_psd_and_count(seed, n):
    rng = np.random.default_rng(seed)
    h = RegressorHistory(2, 1)
    for _ in range(n):
        h.add(rng.standard_normal(2), rng.standard_normal(1),
              rng.standard_normal(2))
    assert len(h) == n
    np.testing.assert_array_equal(h.gram, h.gram.T)
    assert np.linalg.eigvalsh(h.gram).min() >= -1e-10


def state(**kw):
    theta0 = ParamVector(SEC5_THETA0, 2, 1)
    return UncertaintyState.initial(theta0, Box(SEC5_THETA0, 0.07), **kw)


def test_t_star_default():
    # ceil(10 + 5 log 100)
    assert state().t_star == 34 == t_star_of(10, 5, 0.01)


def test_epsilon_plug_in():
    s = state(c3=1.0, alpha=0.5)
    s = replace(s, delta=1.0, alpha=0.0, t_star=1)
    assert epsilon_schedule(math.e, s) == pytest.approx(math.sqrt(1 / math.e))


def test_epsilon_not_active():
    with pytest.raises(ScheduleNotActiveError):
        epsilon_schedule(5, state())


def test_epsilon_decays_and_scales():
    s = state()
    assert epsilon_schedule(10**6, s) < epsilon_schedule(10**3, s)
    s2 = state(c3=2.0)
    assert epsilon_schedule(100, s2) == pytest.approx(
        math.sqrt(2) * epsilon_schedule(100, s), rel=1e-14)


@pytest.mark.parametrize("alpha", [0.01, 0.5, 0.99])
def test_epsilon_eventually_non_increasing(alpha):
    s = state(alpha=alpha)
    eps = np.array([epsilon_schedule(t, s) for t in range(s.t_star, 5000)])
    diffs = np.diff(eps)
    if not np.any(diffs < 0):
        return  # still in the rising phase over this window
    start = np.argmax(diffs < 0)
    assert np.all(diffs[start:] <= 0)


def test_sigma_example_value():
    assert sigma_schedule(0, 0.01, 0.5, 2) == pytest.approx(math.sqrt(2) * 0.01)


def test_sigma_theory_no_decay_limit():
    vals = [sigma_schedule(t, 0.3, 1e-12, 1, mode="theory") for t in range(50)]
    np.testing.assert_allclose(vals, 0.3, rtol=1e-9)


@pytest.mark.parametrize("mode", ["example", "theory"])
@pytest.mark.parametrize("alpha", [0.01, 0.5, 0.99])
def test_sigma_non_increasing(mode, alpha):
    vals = np.array([sigma_schedule(t, 0.01, alpha, 2, mode)
                     for t in range(1001)])
    assert np.all(np.diff(vals) <= 0)


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.5])
def test_sigma_invalid_alpha(alpha):
    with pytest.raises(ValueError):
        sigma_schedule(3, 0.01, alpha, 2)


def test_excitation_zero_scale():
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(sample_excitation(0.0, rng, 3), 0.0)
    np.testing.assert_array_equal(sample_disturbance(0.0, rng, 2), 0.0)


def test_excitation_samples_bounded_and_centred():
    rng = np.random.default_rng(5)
    s = 0.7
    z = np.array([sample_excitation(s, rng, 1)[0] for _ in range(100_000)])
    assert np.abs(z).max() <= 3 * s
    assert abs(z.mean()) <= 3 * z.std(ddof=1) / math.sqrt(z.size)


def test_disturbance_samples_bounded_and_isotropic():
    rng = np.random.default_rng(6)
    s = 0.01
    w = np.array([sample_disturbance(s, rng, 2) for _ in range(100_000)])
    assert np.linalg.norm(w, axis=1).max() <= 3 * s * (1 + 1e-12)
    prod = w[:, 0] * w[:, 1]
    assert abs(prod.mean()) <= 3 * prod.std(ddof=1) / math.sqrt(len(prod))


def test_run_streams_reproducible_and_distinct():
    a1, b1 = run_streams(42, 3)
    a2, b2 = run_streams(42, 3)
    assert a1.standard_normal() == a2.standard_normal()
    assert b1.standard_normal() == b2.standard_normal()
    c, _ = run_streams(42, 4)
    d, _ = run_streams(42, 3)
    assert c.standard_normal() != d.standard_normal()


def test_update_frozen_before_t_star():
    s = state()
    theta_hat = ParamVector(SEC5_THETA0 + 0.01, 2, 1)
    assert update_uncertainty(s, 5, theta_hat) is s


def test_update_no_shrink_when_radius_large():
    s = state()
    centre = ParamVector(s.Theta_t.center, 2, 1)
    new = update_uncertainty(s, s.t_star, centre)
    assert new.Theta_t == s.Theta_t and not new.violated


def test_update_empty_intersection_flag():
    s = state(c3=1e-8)
    far = ParamVector(SEC5_THETA0 + 1.0, 2, 1)
    new = update_uncertainty(s, s.t_star, far)
    assert new.violated and new.Theta_t == s.Theta_t


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-8, 1e-3))
def test_lemma_on_synthetic_good_event(seed, c3):
    # estimates drawn inside B(theta*, eps_t) at every step keep the ball
    # around theta* inside the uncertainty box, and the box only shrinks
    rng = np.random.default_rng(seed)
    theta_star = np.array([0.6, 0.2, -0.1, 0.4, 1.0, 0.6])
    s = state(c3=c3)
    for t in range(s.t_star, s.t_star + 200):
        eps = epsilon_schedule(t, s)
        d = rng.standard_normal(6)
        d *= rng.random() * eps / (math.sqrt(2) * np.linalg.norm(d))
        theta_hat = ParamVector(theta_star + d, 2, 1)
        assert good_event_holds(theta_hat, theta_star, eps)
        prev = s.Theta_t
        s = update_uncertainty(s, t, theta_hat)
        assert prev.contains_box(s.Theta_t, tol=1e-15)
        if ball_in_box(theta_star, eps, Box(SEC5_THETA0, 0.07)):
            assert ball_in_box(theta_star, eps, s.Theta_t, tol=1e-12)


def test_ball_in_box():
    b = Box([0.0, 0.0], [1.0, 2.0])
    assert ball_in_box([0.0, 0.0], 1.0, b)
    assert not ball_in_box([0.5, 0.0], 0.6, b)
