"""Unobserved-components stochastic-volatility model.

    mu_t = mu_bar + rho_mu (mu_{t-1} - mu_bar) + sigma_mu eps_t
    h_t  = h_bar  + rho_h  (h_{t-1}  - h_bar)  + sigma_h  eta_t
    y_t  = mu_t + exp(h_t / 2) u_t

Both state processes start from their stationary law.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

PARAM_NAMES = ("mu_bar", "rho_mu", "sigma_mu", "h_bar", "rho_h", "sigma_h")
LOG_2PI = float(np.log(2.0 * np.pi))


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class UcsvParams:
    mu_bar: float
    rho_mu: float
    sigma_mu: float
    h_bar: float
    rho_h: float
    sigma_h: float

    def __post_init__(self) -> None:
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ModelError(f"non-finite parameter: {vals}")
        if not (0.0 <= self.rho_mu < 1.0 and 0.0 <= self.rho_h < 1.0):
            raise ModelError("autoregressive coefficients must lie in [0, 1)")
        if self.sigma_mu < 0.0 or self.sigma_h < 0.0:
            raise ModelError("scale parameters must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.mu_bar, self.rho_mu, self.sigma_mu, self.h_bar, self.rho_h, self.sigma_h])

    @classmethod
    def from_array(cls, arr) -> "UcsvParams":
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class LatentPaths:
    mu: np.ndarray
    h: np.ndarray

    def __post_init__(self) -> None:
        if self.mu.shape != self.h.shape:
            raise ModelError("mu and h paths must have equal length")


@dataclass(frozen=True)
class DgpConfig:
    params: UcsvParams
    T: int
    seed: int

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ModelError("T must be >= 1")


@dataclass(frozen=True)
class PriorSpec:
    """Independent priors: normal on the two means, uniform on the AR
    coefficients, inverse gamma on the two innovation variances."""
    mu_bar_mean: float = 0.0
    mu_bar_var: float = 1000.0
    h_bar_mean: float = 0.0
    h_bar_var: float = 1000.0
    ig_shape: float = 1.001
    ig_scale: float = 1.001

    def as_array(self) -> np.ndarray:
        return np.array([self.mu_bar_mean, self.mu_bar_var, self.h_bar_mean, self.h_bar_var,
                         self.ig_shape, self.ig_scale])


DEFAULT_PRIOR = PriorSpec()

DGPS = {
    1: UcsvParams(0.0, 0.8, 0.5, -1.0, 0.0, 0.0),
    2: UcsvParams(0.0, 0.0, 0.5, -1.3, 0.95, 0.3),
    3: UcsvParams(0.0, 0.8, 0.5, -1.3, 0.95, 0.3),
}


def _stationary_ar(c: float, rho: float, sigma: float, z: np.ndarray) -> np.ndarray:
    out = np.empty(z.size)
    out[0] = c + sigma / np.sqrt(1.0 - rho * rho) * z[0]
    for t in range(1, z.size):
        out[t] = c + rho * (out[t - 1] - c) + sigma * z[t]
    return out


def simulate(config: DgpConfig) -> tuple[np.ndarray, LatentPaths]:
    p = config.params
    rng = np.random.default_rng(config.seed)
    z = rng.standard_normal((config.T, 3))
    mu = _stationary_ar(p.mu_bar, p.rho_mu, p.sigma_mu, z[:, 0])
    h = _stationary_ar(p.h_bar, p.rho_h, p.sigma_h, z[:, 1])
    y = mu + np.exp(0.5 * h) * z[:, 2]
    return y, LatentPaths(mu, h)


def _log_ig(x: float, a: float, b: float) -> float:
    if x <= 0.0:
        return -np.inf
    return a * np.log(b) - special.gammaln(a) - (a + 1.0) * np.log(x) - b / x


def _log_normal(x: float, m: float, v: float) -> float:
    return -0.5 * (LOG_2PI + np.log(v) + (x - m) ** 2 / v)


def log_prior(params: UcsvParams, prior: PriorSpec = DEFAULT_PRIOR, scale: str = "variance") -> float:
    """Log prior density.

    ``scale="variance"`` is the density over (mu_bar, rho_mu, sigma_mu^2, ...);
    ``scale="sd"`` adds log|d sigma^2 / d sigma| for the two scale parameters.
    """
    if scale not in ("variance", "sd"):
        raise ValueError("scale must be 'variance' or 'sd'")
    if not (0.0 < params.rho_mu < 1.0 and 0.0 < params.rho_h < 1.0):
        return -np.inf
    out = _log_normal(params.mu_bar, prior.mu_bar_mean, prior.mu_bar_var)
    out += _log_normal(params.h_bar, prior.h_bar_mean, prior.h_bar_var)
    for s in (params.sigma_mu, params.sigma_h):
        out += _log_ig(s * s, prior.ig_shape, prior.ig_scale)
        if scale == "sd" and s > 0.0:
            out += np.log(2.0 * s)
    return float(out)


def ar1_logdensity(x: np.ndarray, c: float, rho: float, sig2: float) -> float:
    """log p(x_{1:T}) for a stationary Gaussian AR(1)."""
    if sig2 <= 0.0 or not 0.0 <= rho < 1.0:
        return -np.inf
    d = x - c
    e = d[1:] - rho * d[:-1]
    ss = (1.0 - rho * rho) * d[0] ** 2 + float(e @ e)
    return float(-0.5 * x.size * (LOG_2PI + np.log(sig2)) + 0.5 * np.log1p(-rho * rho) - ss / (2.0 * sig2))


def ar1_gradient(x: np.ndarray, c: float, rho: float, sig2: float) -> np.ndarray:
    """Gradient of ``ar1_logdensity`` in (c, rho, sig2)."""
    d = x - c
    e = d[1:] - rho * d[:-1]
    one_m = 1.0 - rho * rho
    g_c = (one_m * d[0] + (1.0 - rho) * e.sum()) / sig2
    g_rho = -rho / one_m + (rho * d[0] ** 2 + float(e @ d[:-1])) / sig2
    ss = one_m * d[0] ** 2 + float(e @ e)
    g_s = -0.5 * x.size / sig2 + 0.5 * ss / sig2**2
    return np.array([g_c, g_rho, g_s])


def ar1_state_gradient(x: np.ndarray, c: float, rho: float, sig2: float) -> np.ndarray:
    """Gradient of ``ar1_logdensity`` in the path x (tridiagonal precision times x - c)."""
    d = x - c
    qd = (1.0 + rho * rho) * d
    qd[0] = d[0]
    qd[-1] = d[-1]
    if x.size == 1:
        qd[0] = (1.0 - rho * rho) * d[0]
    else:
        qd[:-1] -= rho * d[1:]
        qd[1:] -= rho * d[:-1]
    return -qd / sig2


def measurement_loglik(y: np.ndarray, mu: np.ndarray, h: np.ndarray) -> float:
    r = y - mu
    return float(-0.5 * (y.size * LOG_2PI + h.sum() + np.sum(r * r * np.exp(-h))))


def complete_data_loglik(params: UcsvParams, latents: LatentPaths, y: np.ndarray) -> float:
    """log p(y, mu, h | theta)."""
    y = np.asarray(y, dtype=float)
    if y.shape != latents.mu.shape:
        raise ModelError("y and latent paths differ in length")
    if params.sigma_mu <= 0.0 or params.sigma_h <= 0.0:
        return -np.inf
    return (measurement_loglik(y, latents.mu, latents.h)
            + ar1_logdensity(latents.mu, params.mu_bar, params.rho_mu, params.sigma_mu**2)
            + ar1_logdensity(latents.h, params.h_bar, params.rho_h, params.sigma_h**2))


# unconstrained coordinates: (mu_bar, logit rho_mu, log sigma_mu^2, h_bar, logit rho_h, log sigma_h^2)

def to_unconstrained(params: UcsvParams) -> np.ndarray:
    a = params.as_array()
    u = a.copy()
    for i in (1, 4):
        u[i] = special.logit(a[i])
    for i in (2, 5):
        u[i] = 2.0 * np.log(a[i])
    return u


def from_unconstrained(u: np.ndarray) -> tuple[UcsvParams, float]:
    """Map to model parameters and return log|d(mu_bar, rho, sigma^2, ...)/du|."""
    theta, logj = _from_u(np.asarray(u, dtype=float))
    return UcsvParams.from_array(theta), logj


def _from_u(u: np.ndarray) -> tuple[np.ndarray, float]:
    theta = u.copy()
    logj = 0.0
    for i in (1, 4):
        r = special.expit(u[i])
        theta[i] = min(r, 1.0 - 1e-12)
        logj += float(np.log(r) + np.log1p(-r)) if 0.0 < r < 1.0 else -np.inf
    for i in (2, 5):
        theta[i] = np.exp(0.5 * u[i])
        logj += float(u[i])
    return theta, logj


def from_unconstrained_batch(u: np.ndarray) -> np.ndarray:
    """Vectorised map from rows of unconstrained draws to parameter arrays."""
    u = np.atleast_2d(u)
    out = u.copy()
    out[:, [1, 4]] = np.minimum(special.expit(u[:, [1, 4]]), 1.0 - 1e-12)
    out[:, [2, 5]] = np.exp(0.5 * u[:, [2, 5]])
    return out


@dataclass
class UnconstrainedTarget:
    """log p(theta(u)) + log|J(u)| with its gradient in u."""
    prior: PriorSpec = field(default_factory=PriorSpec)

    def prior_terms(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        pr = self.prior
        g = np.zeros(6)
        val = 0.0
        for i, (m, v) in ((0, (pr.mu_bar_mean, pr.mu_bar_var)), (3, (pr.h_bar_mean, pr.h_bar_var))):
            val += _log_normal(u[i], m, v)
            g[i] = -(u[i] - m) / v
        for i in (1, 4):
            # uniform prior: only the logit Jacobian remains
            val += -np.logaddexp(0.0, -u[i]) - np.logaddexp(0.0, u[i])
            g[i] = 1.0 - 2.0 * special.expit(u[i])
        a, b = pr.ig_shape, pr.ig_scale
        for i in (2, 5):
            s2 = np.exp(u[i])
            val += a * np.log(b) - special.gammaln(a) - a * u[i] - b / s2
            g[i] = -a + b / s2
        return float(val), g


def ar_gradient_u(x: np.ndarray, c: float, rho: float, sig2: float) -> np.ndarray:
    """Gradient of the AR(1) path density in (c, logit rho, log sig2)."""
    g = ar1_gradient(x, c, rho, sig2)
    return np.array([g[0], g[1] * rho * (1.0 - rho), g[2] * sig2])
