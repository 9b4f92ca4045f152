import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import linear_run, linear_system
from powerdse import filters as fl
from powerdse.filters import (FilterConfig, GaussianBelief, PowerSystemModel, SqrtBelief,
                              cholupdate, cubature_points, discrete_f, initial_belief,
                              repair_psd, ut_sigma_points, weighted_moments)
from powerdse.powermodel import f_eval, h_eval
from powerdse.sim import rk4_step

FILTERS = ["ekf", "ukf", "srukf", "ckf"]


def random_cov(rng, n):
    A = rng.standard_normal((n, n))
    return A @ A.T + 0.1 * np.eye(n)


# --- point sets ---------------------------------------------------------------

def test_ut_scalar_example():
    X, wm, wc = ut_sigma_points(GaussianBelief(np.zeros(1), np.eye(1)), kappa=2.0)
    np.testing.assert_allclose(X[:, 0], [0.0, np.sqrt(3), -np.sqrt(3)], rtol=1e-15)
    np.testing.assert_allclose(wm, [2 / 3, 1 / 6, 1 / 6], rtol=1e-15)


def test_ut_centre_weight_negative_in_high_dimension():
    _, wm, _ = ut_sigma_points(GaussianBelief(np.zeros(12), np.eye(12)), kappa=3 - 12)
    assert wm[0] == pytest.approx(-3.0, rel=1e-14)


def test_cubature_example():
    X, w = cubature_points(GaussianBelief(np.zeros(2), np.eye(2)))
    expect = {(np.sqrt(2), 0.0), (0.0, np.sqrt(2)), (-np.sqrt(2), 0.0), (0.0, -np.sqrt(2))}
    got = {tuple(np.round(r, 14)) for r in X}
    assert got == {tuple(np.round(r, 14)) for r in expect}
    np.testing.assert_array_equal(w, 0.25)


@pytest.mark.parametrize("n", [1, 4, 12])
def test_point_sets_match_moments(n, rng):
    mean = rng.standard_normal(n)
    cov = random_cov(rng, n)
    X, wm, wc = ut_sigma_points(GaussianBelief(mean, cov), kappa=3 - n)
    m, P = weighted_moments(X, wm, wc)
    np.testing.assert_allclose(m, mean, rtol=0, atol=1e-12 * max(1, np.abs(mean).max()))
    np.testing.assert_allclose(P, cov, rtol=0, atol=1e-12 * np.abs(cov).max())
    X, w = cubature_points(GaussianBelief(mean, cov))
    assert np.all(w > 0)
    m, P = weighted_moments(X, w)
    np.testing.assert_allclose(m, mean, rtol=0, atol=1e-12 * max(1, np.abs(mean).max()))
    np.testing.assert_allclose(P, cov, rtol=0, atol=1e-12 * np.abs(cov).max())


def test_ut_exact_for_quadratic_measurement():
    m, P = 0.7, 0.3
    X, wm, _ = ut_sigma_points(GaussianBelief(np.array([m]), np.array([[P]])), kappa=2.0)
    assert wm @ X[:, 0] ** 2 == pytest.approx(m * m + P, rel=1e-14)


def test_cubature_linear_map_covariance(rng):
    n, p = 5, 3
    mean, cov = rng.standard_normal(n), random_cov(rng, n)
    M = rng.standard_normal((p, n))
    R = 0.01 * np.eye(p)
    X, w = cubature_points(GaussianBelief(mean, cov))
    _, Pyy = weighted_moments(X @ M.T, w)
    np.testing.assert_allclose(Pyy + R, M @ cov @ M.T + R, atol=1e-12)


# --- factor helpers -------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 31 - 1))
def test_cholupdate_rank_one(n, seed):
    rng = np.random.default_rng(seed)
    P = random_cov(rng, n)
    S = np.linalg.cholesky(P)
    v = rng.standard_normal(n)
    np.testing.assert_allclose(cholupdate(S, v, 1.0) @ cholupdate(S, v, 1.0).T,
                               P + np.outer(v, v), atol=1e-10 * np.abs(P).max())
    small = 0.1 * v / np.linalg.norm(np.linalg.solve(S, v))
    Sd = cholupdate(S, small, -1.0)
    np.testing.assert_allclose(Sd @ Sd.T, P - np.outer(small, small),
                               atol=1e-10 * np.abs(P).max())


def test_cholupdate_downdate_failure():
    with pytest.raises(fl.NumericalInstability):
        cholupdate(np.eye(2), np.array([2.0, 0.0]), -1.0)


def test_repair_psd_lifts_negative_eigenvalues():
    P = np.array([[1.0, 0.0], [0.0, -1e-3]])
    Q = repair_psd(P)
    assert np.min(np.linalg.eigvalsh(Q)) >= 1e-12 * 0.999


# --- linear-Gaussian equivalence ---------------------------------------------------

@pytest.mark.parametrize("name", FILTERS)
def test_linear_system_matches_kalman_filter(name):
    means, covs, ref_m, ref_P = linear_run(name)
    assert np.max(np.linalg.norm(means - ref_m, axis=1)) < 1e-8
    assert np.max(np.abs(covs - ref_P)) < 1e-8


@pytest.mark.parametrize("name", FILTERS)
def test_zero_innovation_keeps_mean(name):
    F, H, model = linear_system(4, 3, seed=5)
    m0 = np.array([0.3, -0.2, 0.1, 0.5])
    belief = GaussianBelief(m0, 0.5 * np.eye(4))
    if name == "srukf":
        belief = fl.to_sqrt(belief)
    cfg = FilterConfig(Q=0.01 * np.eye(4), R=0.04 * np.eye(3))
    step = getattr(fl, f"{name}_step")
    out, info = step(belief, None, H @ F @ m0, model, cfg, 0.0, 1.0)
    np.testing.assert_allclose(out.mean, F @ m0, atol=1e-13)
    np.testing.assert_allclose(info.innovation, 0.0, atol=1e-13)


def test_large_measurement_noise_turns_update_off():
    F, H, model = linear_system(4, 3, seed=6)
    m0 = np.ones(4)
    cfg = FilterConfig(Q=np.zeros((4, 4)), R=1e12 * np.eye(3))
    out, _ = fl.ekf_step(GaussianBelief(m0, np.eye(4)), None, np.full(3, 50.0), model, cfg,
                         0.0, 1.0)
    np.testing.assert_allclose(out.mean, F @ m0, atol=1e-8)
    np.testing.assert_allclose(out.cov, F @ F.T, atol=1e-8)


def test_srukf_without_noise_or_update_keeps_factor():
    n = 3
    ident = fl.DiscreteModel(lambda X, u, t: np.asarray(X), lambda X, t: np.asarray(X)[:, :1])
    cfg = FilterConfig(Q=1e-300 * np.eye(n), R=1e30 * np.eye(1))
    b = SqrtBelief(np.zeros(n), np.eye(n))
    out, _ = fl.srukf_step(b, None, np.zeros(1), ident, cfg, 0.0, 1.0,
                           sqrt_Q=np.zeros((n, n)))
    np.testing.assert_allclose(np.abs(out.sqrt_factor), np.eye(n), atol=1e-12)


# --- power-system discretization ----------------------------------------------------

def test_discrete_f_zero_step_is_identity(case):
    x = case.x0 + 0.1
    np.testing.assert_array_equal(discrete_f(x, case.u0, case.Y_post, 0.0, case), x)


def test_discrete_f_keeps_equilibrium(case):
    x = discrete_f(case.x0, case.u0, case.Y_pre, 1 / 60, case)
    assert np.max(np.abs(x - case.x0)) < 1e-8


def test_discrete_f_matches_micro_step_composition(case, rng):
    pr = case.params()
    for _ in range(5):
        x = case.x0 + 0.05 * rng.standard_normal(case.n)
        ref = x.copy()
        for _ in range(10):
            ref = rk4_step(lambda z, u, t: f_eval(z, u, case.Y_post, pr), ref, case.u0, 1 / 600)
        np.testing.assert_allclose(discrete_f(x, case.u0, case.Y_post, 1 / 60, case), ref,
                                   rtol=0, atol=1e-8)


def test_transition_jacobian_matches_finite_difference(case, rng):
    model = PowerSystemModel(case)
    x = case.x0 + 0.05 * rng.standard_normal(case.n)
    F = model.transition_jacobian(x, case.u0, 2.0)
    ref = fl.fd_jacobian(lambda z: model.transition(z, case.u0, 2.0), x)
    euler = np.eye(case.n) + model.dt * fl.jacobian_f(x, case.u0, case.Y_post, case)
    # frozen-Jacobian propagation: error O(dt^2), below the first-order map
    assert np.linalg.norm(F - ref) < 0.5 * np.linalg.norm(euler - ref)
    assert np.max(np.abs(F - ref)) < 1e-2


def test_model_switches_admittance_at_one_second(case):
    model = PowerSystemModel(case)
    assert model.Y_at(0.99) is case.Y_pre
    assert model.Y_at(60 / 60) is case.Y_post


def test_initial_belief(case):
    b = initial_belief(case)
    m = case.m
    np.testing.assert_array_equal(b.mean[m:2 * m], case.omega_s)
    np.testing.assert_array_equal(b.mean[:m], 2 * case.x0[:m])
    np.testing.assert_array_equal(b.mean[2 * m:], 2 * case.x0[2 * m:])
    np.testing.assert_array_equal(b.cov, 0.1 * np.eye(case.n))


@pytest.mark.parametrize("name", FILTERS)
def test_covariance_hygiene_on_power_model(case, name):
    model = PowerSystemModel(case)
    cfg = FilterConfig(Q=1e-6 * np.eye(case.n), R=1e-4 * np.eye(case.p))
    belief = initial_belief(case)
    if name == "srukf":
        belief = fl.to_sqrt(belief)
    step = getattr(fl, f"{name}_step")
    y = h_eval(case.x0, case.Y_pre, case)
    for k in range(20):
        belief, _ = step(belief, case.u0, y, model, cfg, k / 60, (k + 1) / 60)
        P = belief.cov
        assert np.max(np.abs(P - P.T)) <= 1e-10
        assert np.min(np.linalg.eigvalsh(P)) >= -1e-10
