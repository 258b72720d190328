import dataclasses

import numpy as np
import pytest

from ssmvb import mcmc
from ssmvb.mcmc import McmcConfig, run_mcmc
from ssmvb.ucsv import DGPS, DgpConfig, UcsvParams, from_unconstrained_batch, simulate, to_unconstrained
from ssmvb.vb_engine import GaussianFactorVariational, SgaConfig
from ssmvb.vb_methods import (
    QNK_BANDWIDTH, CyConfig, LsndConfig, QnkConfig, QnkStates, ThetaSampler, cy_elbo, fit_cy, fit_lsnd,
    fit_qnk, lsnd_state_marginals, qnk_initial_states,
)


# DGP 2 puts rho_mu on the boundary; unconstrained tests use an interior neighbour
INTERIOR = UcsvParams(0.0, 0.3, 0.5, -1.3, 0.95, 0.3)


@pytest.fixture(scope="module")
def dgp2_short():
    return simulate(DgpConfig(DGPS[2], 400, 21))[0]


def random_qnk_states(n, seed):
    rng = np.random.default_rng(seed)
    m = 2 * n
    bands = rng.normal(scale=0.3, size=(QNK_BANDWIDTH, m))
    for k in range(1, QNK_BANDWIDTH + 1):
        bands[k - 1, :k] = 0.0
    return QnkStates(rng.normal(size=m), bands, rng.normal(scale=0.2, size=m) - 1.0)


def dense_c(s: QnkStates) -> np.ndarray:
    m = s.mean.size
    c = np.diag(np.exp(s.log_diag))
    for k in range(1, QNK_BANDWIDTH + 1):
        for i in range(k, m):
            c[i, i - k] = s.bands[k - 1, i]
    return c


@pytest.mark.parametrize("n", [2, 7, 32])
def test_qnk_banded_operations_match_dense(n):
    s = random_qnk_states(n, n)
    c = dense_c(s)
    cov = c @ c.T
    xi = np.random.default_rng(0).normal(size=2 * n)
    np.testing.assert_allclose(s.apply(xi), c @ xi, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(s.marginal_var(), np.diag(cov), rtol=1e-10)
    mean, last = s.last_state()
    np.testing.assert_allclose(last, cov[-2:, -2:], rtol=1e-10, atol=1e-14)
    np.testing.assert_array_equal(mean, s.mean[-2:])
    assert 2.0 * np.sum(s.log_diag) == pytest.approx(np.linalg.slogdet(cov)[1], rel=1e-8, abs=1e-8)


def test_qnk_marginals_lognormal_moment():
    s = random_qnk_states(5, 1)
    sm = s.marginals()
    v = s.marginal_var()
    np.testing.assert_allclose(sm.sd_mean, np.exp(s.mean[1::2] / 2 + v[1::2] / 8), rtol=1e-12)
    draws = s.mean[1] + np.sqrt(v[1]) * np.random.default_rng(0).standard_normal(400_000)
    assert np.exp(draws / 2).mean() == pytest.approx(sm.sd_mean[0], rel=3e-3)


def test_qnk_extend_appends_one_step():
    s = random_qnk_states(4, 2)
    e = s.extend(DGPS[3].as_array(), 0.3, 0.1)
    assert e.n == 5
    np.testing.assert_array_equal(e.mean[:8], s.mean)
    np.testing.assert_allclose(np.exp(e.log_diag[-2:]), 0.1)


def test_qnk_fit_improves_elbo_and_is_deterministic(dgp2_short):
    cfg = QnkConfig(sga=SgaConfig(max_iter=3000, min_iter=3000))
    a = fit_qnk(dgp2_short, cfg, np.random.default_rng(4))
    b = fit_qnk(dgp2_short, cfg, np.random.default_rng(4))
    np.testing.assert_array_equal(a.q_theta.mean, b.q_theta.mean)
    sm = a.elbo_trace.smoothed
    assert len(sm) == 15
    # smoothed trace rises overall and never drops by more than a small fraction
    assert np.mean(sm[-3:]) > np.mean(sm[:3])
    drops = -np.diff(sm)
    assert np.max(drops) < 0.01 * abs(sm[-1])
    with pytest.raises(ValueError):
        fit_qnk(dgp2_short, cfg, np.random.default_rng(0), init_states=qnk_initial_states(dgp2_short[:10], 0.1))


def test_lsnd_point_mass_reduces_to_fixed_theta(dgp2_short):
    y = dgp2_short
    q = GaussianFactorVariational.point_mass(to_unconstrained(INTERIOR))
    theta = UcsvParams.from_array(from_unconstrained_batch(q.mean)[0])
    init = mcmc.initial_state(y, theta)
    sm = lsnd_state_marginals(y, q, 200, 50, np.random.default_rng(5), init)
    rng_states, _ = np.random.default_rng(5).spawn(2)
    ref = run_mcmc(y, McmcConfig(n_iter=200, n_burn=50, track_log_joint=False), rng_states,
                   fix_theta=theta, init=init)
    np.testing.assert_allclose(sm.sd_mean, ref.sd_mean, rtol=1e-9)
    np.testing.assert_allclose(sm.mu_mean, ref.mu_mean, rtol=1e-9, atol=1e-12)


def test_lsnd_zero_learning_rate_keeps_initial_q(dgp2_short):
    q0 = GaussianFactorVariational.isotropic(to_unconstrained(INTERIOR))
    cfg = dataclasses.replace(LsndConfig(), sga=SgaConfig(lr=0.0))
    fit = fit_lsnd(dgp2_short, cfg, np.random.default_rng(0), init_q=q0)
    assert fit.q_theta is q0


def test_lsnd_close_to_exact_posterior():
    y, _ = simulate(DgpConfig(DGPS[3], 1000, 8))
    exact = run_mcmc(y, McmcConfig(n_iter=6000, n_burn=2000, track_log_joint=False), np.random.default_rng(1))
    fit = fit_lsnd(y, LsndConfig(), np.random.default_rng(2))
    draws = ThetaSampler(fit.q_theta).batch(np.random.default_rng(3), 20000)
    post_mean, post_sd = exact.thetas.mean(0), exact.thetas.std(0)
    assert np.all(np.abs(draws.mean(0) - post_mean) <= 2 * post_sd)


def test_cy_elbo_monotone_and_converges(dgp2_short):
    fit = fit_cy(dgp2_short, CyConfig())
    e = np.array(fit.elbo_trace.noisy)
    assert np.all(np.diff(e) >= -1e-8)
    assert fit.elbo_trace.converged
    q = fit.q_states
    assert cy_elbo(dgp2_short, q) == pytest.approx(e[-1])
    assert np.isfinite(q.h_cov_bands()[0])


def test_cy_shrinks_state_variance_on_constant_volatility():
    # the IG(1.001, 1.001) prior keeps the mean away from zero, but it falls with T
    def mean_sig2(y):
        q = fit_cy(y, CyConfig()).q_states
        return q.s / (q.nu - 1)

    noise = np.random.default_rng(0).standard_normal(4000)
    short, long_ = mean_sig2(noise[:1000]), mean_sig2(noise)
    y_sv, _ = simulate(DgpConfig(UcsvParams(0.0, 0.0, 1e-6, -1.3, 0.95, 0.3), 1000, 0))
    assert short < 0.1 and long_ < 0.5 * short
    assert short < mean_sig2(y_sv)


def test_cy_warm_start_extension(dgp2_short):
    q = fit_cy(dgp2_short[:-1], CyConfig()).q_states
    ext = q.extend()
    assert ext.m.size == dgp2_short.size and ext.k_off.size == dgp2_short.size - 1
    warm = fit_cy(dgp2_short, CyConfig(), init=ext)
    cold = fit_cy(dgp2_short, CyConfig())
    assert warm.elbo_trace.n_iter < cold.elbo_trace.n_iter
    assert warm.elbo_trace.noisy[-1] == pytest.approx(cold.elbo_trace.noisy[-1], rel=1e-4)
    with pytest.raises(ValueError):
        fit_cy(dgp2_short, CyConfig(), init=q)
