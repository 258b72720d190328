"""Exact Bayesian posterior sampler for the UCSV model.

Trend path by forward filtering / backward sampling, log-volatility path by
FFBS on the seven-component mixture representation of log(e_t^2), then
conjugate Gibbs steps for the means and variances and adaptive random-walk
Metropolis-Hastings for the two AR coefficients.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import _kernels as K
from .ucsv import DEFAULT_PRIOR, LatentPaths, PriorSpec, UcsvParams, complete_data_loglik

TARGET_ACCEPT = 0.3


class McmcError(RuntimeError):
    def __init__(self, message: str, state: "ChainState | None" = None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class McmcConfig:
    n_iter: int = 15000
    n_burn: int = 5000
    thin: int = 1
    adapt: bool = True
    init_step: float = 0.05
    keep_paths: bool = False
    track_log_joint: bool = True
    prior: PriorSpec = field(default_factory=PriorSpec)

    def __post_init__(self) -> None:
        if self.n_iter < 1 or self.n_burn < 0 or self.thin < 1:
            raise ValueError("need n_iter >= 1, n_burn >= 0, thin >= 1")
        if self.n_burn >= self.n_iter:
            raise ValueError("n_burn must be smaller than n_iter")


@dataclass
class ChainState:
    """Mutable sampler state; ``pars`` stores variances, not standard deviations."""
    mu: np.ndarray
    h: np.ndarray
    pars: np.ndarray
    steps: np.ndarray

    def copy(self) -> "ChainState":
        return ChainState(self.mu.copy(), self.h.copy(), self.pars.copy(), self.steps.copy())

    @property
    def params(self) -> UcsvParams:
        return UcsvParams.from_array(pars_to_theta(self.pars))

    def extend(self, rng: np.random.Generator) -> "ChainState":
        """Append one step of each state process drawn from its transition."""
        p = self.pars
        z = rng.standard_normal(2)
        mu_n = p[0] + p[1] * (self.mu[-1] - p[0]) + np.sqrt(p[2]) * z[0]
        h_n = p[3] + p[4] * (self.h[-1] - p[3]) + np.sqrt(p[5]) * z[1]
        return ChainState(np.append(self.mu, mu_n), np.append(self.h, h_n), p.copy(), self.steps.copy())


@dataclass
class PosteriorDraws:
    thetas: np.ndarray            # (n_keep, 6) in (mu_bar, rho_mu, sigma_mu, h_bar, rho_h, sigma_h)
    last_mu: np.ndarray
    last_h: np.ndarray
    mu_mean: np.ndarray           # posterior mean of mu_t
    sd_mean: np.ndarray           # posterior mean of exp(h_t / 2)
    h_mean: np.ndarray
    acceptance: np.ndarray
    final_state: ChainState
    log_joint: np.ndarray | None = None
    mu_paths: np.ndarray | None = None
    h_paths: np.ndarray | None = None
    wall_time: float = 0.0

    def params(self, i: int) -> UcsvParams:
        return UcsvParams.from_array(self.thetas[i])

    @property
    def latents(self) -> list[LatentPaths]:
        if self.mu_paths is None:
            raise ValueError("paths were not retained; rerun with keep_paths=True")
        return [LatentPaths(m, h) for m, h in zip(self.mu_paths, self.h_paths)]


def theta_to_pars(theta: UcsvParams | np.ndarray) -> np.ndarray:
    a = theta.as_array() if isinstance(theta, UcsvParams) else np.asarray(theta, dtype=float).copy()
    a[[2, 5]] = a[[2, 5]] ** 2
    return a


def pars_to_theta(pars: np.ndarray) -> np.ndarray:
    a = np.array(pars, dtype=float)
    a[..., [2, 5]] = np.sqrt(a[..., [2, 5]])
    return a


def initial_state(y: np.ndarray, theta: UcsvParams | None = None, step: float = 0.05) -> ChainState:
    """Crude data-based starting point."""
    y = np.asarray(y, dtype=float)
    v = max(float(np.var(y)), 1e-6)
    if theta is None:
        theta = UcsvParams(float(np.mean(y)), 0.5, np.sqrt(0.3 * v), float(np.log(0.5 * v)), 0.8, 0.3)
    pars = theta_to_pars(theta)
    window = min(25, y.size)
    kern = np.ones(window) / window
    local = np.convolve((y - y.mean()) ** 2, kern, mode="same")
    h = np.log(np.maximum(local, 1e-4 * v))
    mu = np.full(y.size, float(np.mean(y)))
    return ChainState(mu, h, pars, np.full(2, step))


class _Randoms:
    """Per-sweep random inputs for ``gibbs_sweep``."""

    def __init__(self, n: int, shape: float):
        self.n = n
        self.shape = shape + 0.5 * n

    def draw(self, rng: np.random.Generator):
        n = self.n
        z = rng.standard_normal(2 * n + 4)
        u = rng.random(n + 2)
        gam = rng.standard_gamma(self.shape, size=2)
        return z[:n], u[:n], z[n:2 * n], z[2 * n:], u[n:], gam


def sweep(y: np.ndarray, state: ChainState, rng: np.random.Generator, update_theta: bool = True,
          prior: PriorSpec = DEFAULT_PRIOR, randoms: _Randoms | None = None) -> np.ndarray:
    """Run one sweep in place; return the two MH acceptance indicators."""
    randoms = randoms or _Randoms(y.size, prior.ig_shape)
    eps_mu, u_ind, eps_h, pn, pu, gam = randoms.draw(rng)
    acc = np.zeros(2, dtype=np.int64)
    K.gibbs_sweep(y, state.mu, state.h, state.pars, prior.as_array(), state.steps, update_theta,
                  eps_mu, u_ind, eps_h, pn, pu, gam, acc)
    return acc


def ffbs_mu(y: np.ndarray, h: np.ndarray, theta: UcsvParams, rng: np.random.Generator) -> np.ndarray:
    """Draw mu_{1:T} | y, h, theta."""
    y = np.asarray(y, dtype=float)
    if y.shape != np.shape(h):
        raise ValueError("y and h differ in length")
    if theta.sigma_mu < 0.0:
        raise ValueError("negative sigma_mu")
    out = np.empty(y.size)
    s2 = theta.sigma_mu**2
    K.ffbs_ar1(y, np.exp(np.asarray(h, dtype=float)), theta.mu_bar, theta.rho_mu, s2,
               s2 / (1.0 - theta.rho_mu**2), rng.standard_normal(y.size), out)
    return out


def sample_h_ksc(y: np.ndarray, mu: np.ndarray, theta: UcsvParams, rng: np.random.Generator,
                 h_current: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Draw indicators s | y, mu, h then h | y, mu, s. Returns (h, s)."""
    y = np.asarray(y, dtype=float)
    e = y - np.asarray(mu, dtype=float)
    z = np.log(e * e + K.KSC_OFFSET)
    h0 = np.full(y.size, theta.h_bar) if h_current is None else np.asarray(h_current, dtype=float)
    s = np.empty(y.size, dtype=np.int64)
    K.ksc_indicators(z, h0, rng.random(y.size), s)
    out = np.empty(y.size)
    s2 = theta.sigma_h**2
    K.ffbs_ar1(z - K.KSC_MEANS[s], K.KSC_VARS[s].copy(), theta.h_bar, theta.rho_h, s2,
               s2 / (1.0 - theta.rho_h**2), rng.standard_normal(y.size), out)
    return out, s


def gibbs_linear_params(x: np.ndarray, rho: float, sig2: float, prior_mean: float, prior_var: float,
                        shape: float, scale: float, rng: np.random.Generator) -> tuple[float, float]:
    """Conjugate draws of the AR mean given (rho, sig2), then of sig2 given the new mean."""
    pars = np.array([0.0, rho, sig2])
    z = rng.standard_normal(2)
    gam = rng.standard_gamma(shape + 0.5 * x.size)
    # step = 0 proposal keeps rho fixed
    K._update_ar_block(np.asarray(x, dtype=float), pars, 0, prior_mean, prior_var, shape, scale, 0.0,
                       z[0], 0.0, 1.0, gam)
    return float(pars[0]), float(pars[2])


def mh_rho(current: float, log_target: Callable[[float], float], step: float,
           rng: np.random.Generator) -> tuple[float, bool]:
    """Gaussian random-walk MH on (0, 1); out-of-support proposals are rejected."""
    prop = current + step * rng.standard_normal()
    u = rng.random()
    if not 0.0 < prop < 1.0:
        return current, False
    if np.log(u) < log_target(prop) - log_target(current):
        return prop, True
    return current, False


def run_mcmc(y: np.ndarray, config: McmcConfig = McmcConfig(), rng: np.random.Generator | None = None,
             fix_theta: UcsvParams | None = None, init: ChainState | None = None) -> PosteriorDraws:
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size < 2:
        raise ValueError("y must be a 1-d series of length >= 2")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite values")
    rng = rng or np.random.default_rng()
    t0 = time.perf_counter()
    if init is not None:
        state = init.copy()
        if state.mu.size != y.size:
            raise ValueError("initial state length does not match y")
    else:
        state = initial_state(y, fix_theta, config.init_step)
    if fix_theta is not None:
        state.pars = theta_to_pars(fix_theta)
    update = fix_theta is None
    prior = config.prior
    randoms = _Randoms(y.size, prior.ig_shape)

    n_keep = (config.n_iter - config.n_burn + config.thin - 1) // config.thin
    thetas = np.empty((n_keep, 6))
    last_mu = np.empty(n_keep)
    last_h = np.empty(n_keep)
    mu_sum = np.zeros(y.size)
    sd_sum = np.zeros(y.size)
    h_sum = np.zeros(y.size)
    log_joint = np.empty(n_keep) if config.track_log_joint else None
    mu_paths = np.empty((n_keep, y.size)) if config.keep_paths else None
    h_paths = np.empty((n_keep, y.size)) if config.keep_paths else None
    acc_total = np.zeros(2)
    k = 0
    for it in range(config.n_iter):
        acc = sweep(y, state, rng, update, prior, randoms)
        if update and config.adapt and it < config.n_burn:
            gain = (it + 1.0) ** -0.6
            state.steps = np.clip(state.steps * np.exp(gain * (acc - TARGET_ACCEPT)), 1e-4, 1.0)
        if it < config.n_burn or (it - config.n_burn) % config.thin:
            continue
        acc_total += acc
        th = pars_to_theta(state.pars)
        thetas[k] = th
        last_mu[k] = state.mu[-1]
        last_h[k] = state.h[-1]
        mu_sum += state.mu
        sd_sum += np.exp(0.5 * state.h)
        h_sum += state.h
        if log_joint is not None:
            lj = complete_data_loglik(UcsvParams.from_array(th), LatentPaths(state.mu, state.h), y)
            if not np.isfinite(lj):
                raise McmcError(f"non-finite log joint at iteration {it}", state.copy())
            log_joint[k] = lj
        if mu_paths is not None:
            mu_paths[k] = state.mu
            h_paths[k] = state.h
        k += 1
    if not np.all(np.isfinite(state.pars)):
        raise McmcError("non-finite parameters at end of chain", state.copy())
    return PosteriorDraws(
        thetas=thetas, last_mu=last_mu, last_h=last_h,
        mu_mean=mu_sum / n_keep, sd_mean=sd_sum / n_keep, h_mean=h_sum / n_keep,
        acceptance=acc_total / n_keep, final_state=state, log_joint=log_joint,
        mu_paths=mu_paths, h_paths=h_paths, wall_time=time.perf_counter() - t0,
    )


def state_chain(y: np.ndarray, theta_sampler: Callable[[np.random.Generator], np.ndarray],
                n_iter: int, n_burn: int, rng_states: np.random.Generator, rng_theta: np.random.Generator,
                init: ChainState | None = None, keep_last: bool = True):
    """States-only chain where theta is refreshed from ``theta_sampler`` each sweep.

    Returns (thetas, last_mu, last_h, mu_mean, sd_mean, h_mean, final_state).
    ``theta_sampler`` returns the parameter array (standard-deviation scale).
    """
    y = np.asarray(y, dtype=float)
    state = init.copy() if init is not None else initial_state(y)
    randoms = _Randoms(y.size, DEFAULT_PRIOR.ig_shape)
    n_keep = n_iter - n_burn
    thetas = np.empty((n_keep, 6))
    last_mu = np.empty(n_keep)
    last_h = np.empty(n_keep)
    mu_sum = np.zeros(y.size)
    sd_sum = np.zeros(y.size)
    h_sum = np.zeros(y.size)
    for it in range(n_iter):
        th = theta_sampler(rng_theta)
        state.pars = theta_to_pars(th)
        sweep(y, state, rng_states, False, DEFAULT_PRIOR, randoms)
        if it < n_burn:
            continue
        j = it - n_burn
        thetas[j] = th
        last_mu[j] = state.mu[-1]
        last_h[j] = state.h[-1]
        mu_sum += state.mu
        sd_sum += np.exp(0.5 * state.h)
        h_sum += state.h
    return thetas, last_mu, last_h, mu_sum / n_keep, sd_sum / n_keep, h_sum / n_keep, state


def with_budget(config: McmcConfig, n_iter: int, n_burn: int) -> McmcConfig:
    return replace(config, n_iter=n_iter, n_burn=n_burn)
