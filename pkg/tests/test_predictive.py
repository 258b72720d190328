import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from ssmvb import mcmc
from ssmvb.predictive import PredictiveDensity, components, predict_approx, predict_sim
from ssmvb.persist import GaussianLastState
from ssmvb.ucsv import DGPS, DgpConfig, UcsvParams, simulate, to_unconstrained
from ssmvb.vb_engine import GaussianFactorVariational


def mixture(seed, k):
    rng = np.random.default_rng(seed)
    return PredictiveDensity(rng.normal(scale=2.0, size=k), np.exp(rng.normal(scale=0.5, size=k)))


def test_standard_normal_quantile_and_median():
    pd = PredictiveDensity(np.zeros(1), np.ones(1))
    assert pd.quantile(0.975)[0] == pytest.approx(1.959963985, abs=1e-9)
    two = PredictiveDensity(np.array([-1.0, 1.0]), np.ones(2))
    assert two.quantile(0.5)[0] == pytest.approx(0.0, abs=1e-10)
    with pytest.raises(ValueError):
        pd.quantile([0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 40))
def test_quantile_inverts_cdf(seed, k):
    pd = mixture(seed, k)
    u = np.linspace(0.01, 0.99, 99)
    np.testing.assert_allclose(pd.cdf(pd.quantile(u)), u, atol=1e-8)
    grid = np.linspace(*pd.support(6.0), 500)
    assert np.all(np.diff(pd.cdf(grid)) >= 0)


def test_pdf_integrates_to_one_and_cdf_limits():
    pd = mixture(3, 25)
    lo, hi = pd.support(15.0)
    total, _ = integrate.quad(lambda x: pd.pdf(x)[0], lo, hi, limit=400, points=list(pd.means))
    assert total == pytest.approx(1.0, abs=1e-6)
    assert pd.cdf(-1e6)[0] == 0.0 and pd.cdf(1e6)[0] == 1.0
    np.testing.assert_allclose(pd.cdf([0.3]) + pd.sf([0.3]), 1.0, atol=1e-14)


def test_logpdf_matches_scipy_and_permutation_invariance():
    pd = mixture(4, 6)
    x = np.linspace(-5, 5, 11)
    ref = np.mean([stats.norm(m, s).pdf(x) for m, s in zip(pd.means, pd.sds)], axis=0)
    np.testing.assert_allclose(pd.pdf(x), ref, rtol=1e-12)
    perm = np.random.default_rng(0).permutation(6)
    other = PredictiveDensity(pd.means[perm], pd.sds[perm])
    np.testing.assert_allclose(other.logpdf(x), pd.logpdf(x), rtol=1e-12)


def test_invalid_mixture_rejected():
    with pytest.raises(ValueError):
        PredictiveDensity(np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        PredictiveDensity(np.zeros(0), np.zeros(0))


def test_kde_mode():
    draws = np.random.default_rng(0).standard_normal(5000)
    pd = PredictiveDensity.from_kde(draws)
    assert pd.n_components == 5000
    assert pd.quantile(0.5)[0] == pytest.approx(0.0, abs=0.05)


def test_point_mass_degenerate_noise_gives_single_normal():
    theta = UcsvParams(0.5, 0.6, 0.0, -1.0, 0.8, 0.0)
    pd = components(np.tile(theta.as_array(), (3, 1)), np.full(3, 1.5), np.full(3, 0.2), np.random.default_rng(0))
    np.testing.assert_allclose(pd.means, 0.5 + 0.6 * 1.0)
    np.testing.assert_allclose(pd.sds, np.exp(0.5 * (-1.0 + 0.8 * 1.2)))


def test_mixture_mean_matches_raw_draws():
    theta = DGPS[3]
    rng = np.random.default_rng(1)
    J = 10_000
    pd = components(np.tile(theta.as_array(), (J, 1)), rng.normal(size=J), rng.normal(-1.3, 0.5, J), rng)
    raw = pd.sample(np.random.default_rng(2), J)
    assert abs(raw.mean() - pd.mean()) < 3 * raw.std() / np.sqrt(J)


def test_sim_and_approx_agree_at_point_mass():
    theta = UcsvParams(0.0, 0.5, 0.5, -1.3, 0.9, 0.3)
    y, _ = simulate(DgpConfig(theta, 80, 2))
    q = GaussianFactorVariational.point_mass(to_unconstrained(theta))
    sim, _ = predict_sim(q, y, 3000, np.random.default_rng(0), n_burn=200)
    # the exact last-state law is estimated from a long fixed-theta run, then summarised as Gaussian
    d = mcmc.run_mcmc(y, mcmc.McmcConfig(n_iter=6000, n_burn=1000, track_log_joint=False),
                      np.random.default_rng(3), fix_theta=theta)
    last = np.column_stack([d.last_mu, d.last_h])
    q_x = GaussianLastState(last.mean(0), np.cov(last.T))
    approx = predict_approx(q, q_x, 3000, np.random.default_rng(1))
    a = sim.sample(np.random.default_rng(4), 3000)
    b = approx.sample(np.random.default_rng(5), 3000)
    assert stats.ks_2samp(a, b).pvalue > 0.001


def test_predict_j_validation():
    with pytest.raises(ValueError):
        predict_sim(DGPS[2], np.zeros(20), 0, np.random.default_rng(0))
