"""One-step-ahead predictive densities as equal-weight Gaussian mixtures.

Each component conditions on a draw (theta, mu_n, h_n) propagated one step
through the state transition: y_{n+1} | mu_{n+1}, h_{n+1} ~ N(mu_{n+1}, exp(h_{n+1})).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .mcmc import ChainState, PosteriorDraws, initial_state, state_chain
from .ucsv import UcsvParams
from .vb_engine import GaussianFactorVariational
from .vb_methods import CyVariational, ThetaSampler

_CHUNK = 2_000_000


@dataclass(frozen=True)
class PredictiveDensity:
    means: np.ndarray
    sds: np.ndarray

    def __post_init__(self) -> None:
        if self.means.shape != self.sds.shape or self.means.ndim != 1 or self.means.size == 0:
            raise ValueError("means and sds must be equal-length non-empty vectors")
        if not (np.all(np.isfinite(self.means)) and np.all(np.isfinite(self.sds)) and np.all(self.sds > 0.0)):
            raise ValueError("mixture components must have finite means and positive sds")

    @property
    def n_components(self) -> int:
        return self.means.size

    @classmethod
    def from_kde(cls, draws: np.ndarray, bandwidth: float | None = None) -> "PredictiveDensity":
        """Gaussian kernel density estimate on predictive draws (Silverman bandwidth)."""
        draws = np.asarray(draws, dtype=float)
        if bandwidth is None:
            iqr = np.subtract(*np.percentile(draws, [75, 25]))
            spread = min(np.std(draws, ddof=1), iqr / 1.349) if iqr > 0 else np.std(draws, ddof=1)
            bandwidth = 0.9 * spread * draws.size ** -0.2
        return cls(draws.copy(), np.full(draws.size, float(bandwidth)))

    def _eval(self, x: np.ndarray, fn) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        step = max(1, _CHUNK // self.n_components)
        out = np.empty(x.size)
        for i in range(0, x.size, step):
            z = (x[i:i + step, None] - self.means) / self.sds
            out[i:i + step] = fn(z)
        return out

    def logpdf(self, x) -> np.ndarray:
        logn = np.log(self.n_components)
        log_sd = np.log(self.sds)
        return self._eval(x, lambda z: special.logsumexp(-0.5 * z * z - log_sd, axis=1)
                          - 0.5 * np.log(2.0 * np.pi) - logn)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def cdf(self, x) -> np.ndarray:
        return self._eval(x, lambda z: special.ndtr(z).mean(axis=1))

    def sf(self, x) -> np.ndarray:
        return self._eval(x, lambda z: special.ndtr(-z).mean(axis=1))

    def mean(self) -> float:
        return float(self.means.mean())

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = rng.integers(0, self.n_components, size=size)
        return self.means[idx] + self.sds[idx] * rng.standard_normal(size)

    def support(self, width: float = 12.0) -> tuple[float, float]:
        return float(np.min(self.means - width * self.sds)), float(np.max(self.means + width * self.sds))

    def _cdf_pdf(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = (x[:, None] - self.means) / self.sds
        dens = np.exp(-0.5 * z * z) / self.sds
        return special.ndtr(z).mean(axis=1), dens.mean(axis=1) / np.sqrt(2.0 * np.pi)

    def quantile(self, alpha, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
        """Inverse cdf by bracketed root finding: Newton steps kept inside the
        bracket, bisection otherwise, until the bracket is narrower than ``tol``."""
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        if np.any((alpha <= 0.0) | (alpha >= 1.0)):
            raise ValueError("quantile levels must lie in (0, 1)")
        lo_s, hi_s = self.support(40.0)
        grid = np.linspace(lo_s, hi_s, 1025)
        cg = self.cdf(grid)
        idx = np.clip(np.searchsorted(cg, alpha), 1, grid.size - 1)
        a = grid[idx - 1].copy()
        b = grid[idx].copy()
        ca, cb = cg[idx - 1], cg[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(cb > ca, (alpha - ca) / (cb - ca), 0.5)
        x = a + np.clip(frac, 0.0, 1.0) * (b - a)
        active = np.ones(alpha.size, dtype=bool)
        for _ in range(max_iter):
            if not active.any():
                break
            xa = x[active]
            c, d = self._cdf_pdf(xa)
            f = c - alpha[active]
            aa, bb = a[active], b[active]
            aa = np.where(f < 0.0, xa, aa)
            bb = np.where(f >= 0.0, xa, bb)
            with np.errstate(divide="ignore", invalid="ignore"):
                newton = xa - f / d
            ok = np.isfinite(newton) & (newton > aa) & (newton < bb)
            nx = np.where(ok, newton, 0.5 * (aa + bb))
            done = (bb - aa < tol) | (np.abs(nx - xa) < 0.25 * tol) | (f == 0.0)
            nx = np.where(f == 0.0, xa, nx)
            a[active], b[active], x[active] = aa, bb, nx
            ids = np.flatnonzero(active)
            active[ids[done]] = False
        return x


def components(thetas: np.ndarray, mu_n: np.ndarray, h_n: np.ndarray, rng: np.random.Generator,
               model: str = "ucsv") -> PredictiveDensity:
    """Propagate (theta_j, mu_n^j, h_n^j) one step and return the mixture."""
    thetas = np.atleast_2d(thetas)
    z = rng.standard_normal((2, mu_n.size))
    if model == "rw_sv":
        # thetas[:, 0] holds sigma_h^2
        h_next = h_n + np.sqrt(thetas[:, 0]) * z[1]
        return PredictiveDensity(np.zeros(h_n.size), np.exp(0.5 * h_next))
    mb, rm, sm, hb, rh, sh = thetas.T
    mu_next = mb + rm * (mu_n - mb) + sm * z[0]
    h_next = hb + rh * (h_n - hb) + sh * z[1]
    return PredictiveDensity(mu_next, np.exp(0.5 * h_next))


def predict_from_draws(draws: PosteriorDraws, rng: np.random.Generator, J: int | None = None) -> PredictiveDensity:
    """Exact-Bayes mixture from retained MCMC draws of (theta, mu_n, h_n)."""
    n = draws.thetas.shape[0]
    idx = np.arange(n) if J is None or J >= n else np.linspace(0, n - 1, J).round().astype(int)
    return components(draws.thetas[idx], draws.last_mu[idx], draws.last_h[idx], rng)


def as_theta_sampler(q_theta):
    """Accepts a Gaussian approximation in unconstrained space, fixed parameters, or a sampler."""
    if isinstance(q_theta, GaussianFactorVariational):
        return ThetaSampler(q_theta)
    if isinstance(q_theta, UcsvParams):
        return point_mass_sampler(q_theta.as_array())
    if callable(q_theta):
        return q_theta
    raise TypeError(f"cannot draw parameters from {type(q_theta).__name__}")


def predict_sim(q_theta, y: np.ndarray, J: int, rng: np.random.Generator, n_burn: int = 100,
                init: ChainState | None = None) -> tuple[PredictiveDensity, ChainState]:
    """Simulation approach: theta_j from ``q_theta``, (mu_n, h_n)_j from a
    warm-started Gibbs chain on the states at theta_j. Returns the density and
    the final chain state for warm starts."""
    if J < 1:
        raise ValueError("J must be >= 1")
    y = np.asarray(y, dtype=float)
    theta_sampler = as_theta_sampler(q_theta)
    rng_states, rng_theta, rng_prop = rng.spawn(3)
    init = init if init is not None else initial_state(y)
    thetas, last_mu, last_h, *_, state = state_chain(y, theta_sampler, J + n_burn, n_burn,
                                                    rng_states, rng_theta, init)
    return components(thetas, last_mu, last_h, rng_prop), state


def predict_approx(q_theta, q_states, J: int, rng: np.random.Generator) -> PredictiveDensity:
    """Approximation approach: theta_j from q(theta), x_n from the marginal of q(x)."""
    if J < 1:
        raise ValueError("J must be >= 1")
    rng_theta, rng_state, rng_prop = rng.spawn(3)
    if isinstance(q_states, CyVariational):
        sig2 = q_states.sample_sigma2(rng_theta, J)
        h_n = q_states.sample_last(rng_state, J)
        return components(sig2[:, None], np.zeros(J), h_n, rng_prop, model="rw_sv")
    thetas = ThetaSampler(q_theta).batch(rng_theta, J)
    x = q_states.sample_last(rng_state, J)
    return components(thetas, x[:, 0], x[:, 1], rng_prop)


def point_mass_sampler(theta: np.ndarray):
    theta = np.asarray(theta, dtype=float)
    return lambda rng: theta
