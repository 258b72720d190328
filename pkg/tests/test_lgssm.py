import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, optimize, stats

from ssmvb import lgssm
from ssmvb.lgssm import LgssmParams


def dense_tridiag(a, b, c, n, last=None):
    m = np.diag(np.full(n, float(a)))
    if n > 1:
        m += np.diag(np.full(n - 1, float(b)), 1) + np.diag(np.full(n - 1, float(c)), -1)
    if last is not None:
        m[-1, -1] = last
    return m


@settings(max_examples=200, deadline=None)
@given(st.floats(0.5, 3.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.integers(1, 64))
def test_tridiag_det_matches_dense(a, b, c, n):
    if a * a - 4 * b * c < 0:
        with pytest.raises(ValueError):
            lgssm.tridiag_det(a, b, c, n)
        return
    dense = np.linalg.det(dense_tridiag(a, b, c, n))
    assert lgssm.tridiag_det(a, b, c, n) == pytest.approx(dense, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("n", [1, 2, 5, 17, 64])
def test_tridiag_det_repeated_root(n):
    # a^2 = 4bc: det of tridiag(-1, 2, -1) is n + 1
    assert lgssm.tridiag_det(2.0, -1.0, -1.0, n) == pytest.approx(n + 1, rel=1e-12)


def test_tridiag_det_modified_last_entry():
    for n in (1, 2, 3, 10, 40):
        dense = np.linalg.det(dense_tridiag(1.25, -0.5, -0.5, n, last=1.0))
        assert lgssm.tridiag_det(1.25, -0.5, -0.5, n, last=1.0) == pytest.approx(dense, rel=1e-10)


def test_invalid_params():
    with pytest.raises(ValueError):
        LgssmParams(1.0, 0.5)
    with pytest.raises(ValueError):
        LgssmParams(0.5, np.nan)
    with pytest.raises(ValueError):
        lgssm.optimal_lambda(LgssmParams(0.0, 1.0))
    with pytest.raises(ValueError):
        lgssm.find_theta_star(grid_step=0.0)


def test_log_det_omega_routes_agree():
    th = LgssmParams(0.7, 1.1)
    for n in (5, 50, 399):
        dense = np.linalg.slogdet(lgssm.omega_matrix(th, n))[1]
        assert lgssm.log_det_omega(th, n) == pytest.approx(dense, rel=1e-10)
    # the banded Cholesky branch
    n = 600
    assert lgssm.log_det_omega(th, n) == pytest.approx(np.linalg.slogdet(lgssm.omega_matrix(th, n))[1], rel=1e-10)


def test_trace_matches_dense():
    th = LgssmParams(0.6, 0.9)
    for lam in (0.0, 0.3, 0.8):
        n = 30
        dense = np.trace(lgssm.omega_matrix(th, n) @ lgssm.phi_matrix(lam, n))
        assert lgssm.trace_omega_phi_exact(th, lam, n) == pytest.approx(dense, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.0, 2.0))
def test_optimal_lambda_is_argmax(rho, alpha):
    th = LgssmParams(rho, alpha)
    res = optimize.minimize_scalar(lambda l: -lgssm.limit_criterion(th, l), bounds=(0.0, 1 - 1e-9),
                                   method="bounded", options={"xatol": 1e-12})
    lam = lgssm.optimal_lambda(th)
    assert 0.0 < lam < 1.0
    assert lam == pytest.approx(res.x, abs=1e-6)
    assert lgssm.concentrated_objective(th) == pytest.approx(lgssm.limit_criterion(th, lam), rel=1e-10)


def test_known_lambda_value():
    th = LgssmParams(0.5, 0.0)
    assert lgssm.optimal_lambda(th) == pytest.approx(0.2087121525, abs=1e-9)
    assert lgssm.concentrated_objective(th) == pytest.approx(-0.5 / (4 * 0.2087121525), rel=1e-8)


def test_theta_star_and_monotone_objective():
    star = lgssm.find_theta_star()
    assert (star.rho, star.alpha) == (0.05, 0.0)
    rhos = np.linspace(0.05, 0.95, 181)
    vals = [lgssm.concentrated_objective(LgssmParams(r, 0.0)) for r in rhos]
    assert np.all(np.diff(vals) < 0)


def test_simulate_shapes_and_seed():
    th = LgssmParams(0.5, 1.0)
    x1, y1 = lgssm.simulate(th, 50, np.random.default_rng(3))
    x2, y2 = lgssm.simulate(th, 50, np.random.default_rng(3))
    assert x1.shape == y1.shape == (50,)
    np.testing.assert_array_equal(y1, y2)


def test_marginal_likelihood_matches_kalman_and_dense():
    th = LgssmParams(0.8, 0.7, 1.3)
    _, y = lgssm.simulate(th, 40, np.random.default_rng(0))
    kf = lgssm.kalman_filter(th, y)
    assert lgssm.log_marginal_likelihood(th, y) == pytest.approx(kf.loglik, abs=1e-9)
    # dense route: x_1 ~ N(0, s2), x_t = rho x_{t-1} + N(0, s2), y = alpha x + N(0, s2)
    n = y.size
    s2 = th.sigma0**2
    cov_x = np.empty((n, n))
    var = np.empty(n)
    var[0] = s2
    for i in range(1, n):
        var[i] = th.rho**2 * var[i - 1] + s2
    for i in range(n):
        for j in range(n):
            lo = min(i, j)
            cov_x[i, j] = th.rho ** abs(i - j) * var[lo]
    cov_y = th.alpha**2 * cov_x + s2 * np.eye(n)
    assert kf.loglik == pytest.approx(stats.multivariate_normal(np.zeros(n), cov_y).logpdf(y), abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.95), st.floats(0.0, 2.0), st.floats(0.0, 0.95), st.integers(0, 2**31))
def test_elbo_below_marginal_likelihood(rho, alpha, lam, seed):
    th = LgssmParams(rho, alpha)
    _, y = lgssm.simulate(th, 60, np.random.default_rng(seed))
    assert lgssm.jensen_gap_exact(th, y, lam) >= -1e-8


def test_closed_form_gap_equals_exact_at_rho_zero():
    rng = np.random.default_rng(1)
    for alpha in (0.3, 1.0, 2.0):
        th = LgssmParams(0.0, alpha)
        _, y = lgssm.simulate(th, 300, rng)
        assert lgssm.jensen_gap_closed_form(th, y) == pytest.approx(lgssm.jensen_gap_exact(th, y), rel=1e-10)


@pytest.mark.parametrize("rho", [0.3, 0.5, 0.8])
def test_case2_gap_is_deterministic(rho):
    th = LgssmParams(rho, 0.0)
    y = np.random.default_rng(0).standard_normal(500)
    assert lgssm.jensen_gap_closed_form(th, y) / 500 == pytest.approx(lgssm.jensen_gap_limit_case2(rho), abs=1e-12)


def test_gap_limits_vanish_only_at_zero():
    assert lgssm.jensen_gap_limit_case1(0.0) == 0.0
    assert lgssm.jensen_gap_limit_case2(0.0) == 0.0
    for v in (0.1, 0.5, 0.9):
        assert lgssm.jensen_gap_limit_case1(v) > 0.0
        assert lgssm.jensen_gap_limit_case2(v) > 0.0


def test_kl_state_marginal_quadrature():
    rng = np.random.default_rng(5)
    th = LgssmParams(0.7, 1.2)
    _, y = lgssm.simulate(th, 100, rng)
    lam = 0.3
    kf = lgssm.kalman_filter(th, y)
    p = stats.norm(kf.filtered_mean[-1], np.sqrt(kf.filtered_var[-1]))
    q = stats.norm(0.0, np.sqrt(1.0 / (1.0 - lam**2)))
    val, _ = integrate.quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), -30, 30, epsabs=1e-13, limit=200)
    kl = lgssm.kl_state_marginal(th, lam, y)
    assert kl > 0.0
    assert kl == pytest.approx(val, abs=1e-6)


def test_limit_criteria_relation():
    # per-observation ELBO approaches the exact-trace limit net of the sample second moment
    th = LgssmParams(0.6, 0.8)
    rng = np.random.default_rng(2)
    n = 20000
    _, y = lgssm.simulate(th, n, rng)
    for lam in (0.2, 0.5):
        per_obs = lgssm.elbo_exact(th, lam, y) / n
        expected = lgssm.limit_criterion_exact(th, lam) - float(y @ y) / (2 * n)
        assert per_obs == pytest.approx(expected, abs=2e-3)
