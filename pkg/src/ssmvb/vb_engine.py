"""Stochastic-gradient variational inference with a factor-covariance Gaussian.

q(theta) = N(mean, B B' + diag(d^2)); draws use the reparameterisation
theta = mean + B zeta + d * eps, and the entropy term is handled analytically.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

LogTarget = Callable[[np.ndarray], tuple[float, np.ndarray]]
LOG_2PI_E = float(np.log(2.0 * np.pi * np.e))


class VbError(RuntimeError):
    pass


@dataclass(frozen=True)
class GaussianFactorVariational:
    mean: np.ndarray
    factors: np.ndarray
    diag: np.ndarray

    def __post_init__(self) -> None:
        p = self.mean.shape[0]
        if self.factors.ndim != 2 or self.factors.shape[0] != p or self.diag.shape != (p,):
            raise ValueError("inconsistent shapes for mean, factors, diag")
        if np.any(self.diag <= 0.0):
            raise ValueError("diagonal scales must be positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def cov(self) -> np.ndarray:
        return self.factors @ self.factors.T + np.diag(self.diag**2)

    def entropy(self) -> float:
        _, logdet = np.linalg.slogdet(self.cov)
        return 0.5 * (self.dim * LOG_2PI_E + logdet)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        zeta = rng.standard_normal((size, self.factors.shape[1]))
        eps = rng.standard_normal((size, self.dim))
        return self.mean + zeta @ self.factors.T + eps * self.diag

    @classmethod
    def isotropic(cls, mean: np.ndarray, k: int = 1, scale: float = 0.1, factor_scale: float = 0.01):
        mean = np.asarray(mean, dtype=float)
        return cls(mean.copy(), np.full((mean.size, k), factor_scale), np.full(mean.size, scale))

    @classmethod
    def point_mass(cls, mean: np.ndarray, k: int = 1):
        mean = np.asarray(mean, dtype=float)
        return cls(mean.copy(), np.zeros((mean.size, k)), np.full(mean.size, 1e-300))


@dataclass(frozen=True)
class SgaConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    n_samples: int = 1
    window: int = 200
    tol: float = 1e-3
    patience: int = 5
    max_iter: int = 10000
    min_iter: int = 1000
    divergence_windows: int = 5
    average_windows: int = 5

    def __post_init__(self) -> None:
        if self.lr < 0.0 or self.n_samples < 1 or self.window < 1 or self.max_iter < 1:
            raise ValueError("invalid SGA settings")


@dataclass
class ElboTrace:
    noisy: list[float] = field(default_factory=list)
    smoothed: list[float] = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    rejected_draws: int = 0
    window: int = 1

    def rows(self):
        """(iteration, noisy, smoothed); smoothed is the latest completed window mean."""
        out = []
        for i, v in enumerate(self.noisy):
            k = (i + 1) // self.window
            s = self.smoothed[k - 1] if 0 < k <= len(self.smoothed) else float("nan")
            out.append((i + 1, v, s))
        return out


@dataclass
class ElboGradient:
    mean: np.ndarray
    factors: np.ndarray
    log_diag: np.ndarray
    elbo: float
    rejected: int = 0


def sample_reparam(q: GaussianFactorVariational, rng: np.random.Generator):
    zeta = rng.standard_normal(q.factors.shape[1])
    eps = rng.standard_normal(q.dim)
    return q.mean + q.factors @ zeta + q.diag * eps, (zeta, eps)


def entropy_gradients(q: GaussianFactorVariational) -> tuple[np.ndarray, np.ndarray]:
    """d H / d B and d H / d log d."""
    prec = np.linalg.inv(q.cov)
    return prec @ q.factors, np.diag(prec) * q.diag**2


def elbo_gradient(q: GaussianFactorVariational, log_target: LogTarget, config: SgaConfig,
                  rng: np.random.Generator, noise=None) -> ElboGradient:
    """Reparameterisation estimate of the ELBO gradient in (mean, B, log d).

    ``noise`` optionally fixes the (zeta, eps) draws for common-random-number checks.
    """
    s_count = config.n_samples
    g_m = np.zeros(q.dim)
    g_b = np.zeros_like(q.factors)
    g_d = np.zeros(q.dim)
    val = 0.0
    rejected = 0
    s = 0
    attempts = 0
    while s < s_count:
        attempts += 1
        if noise is not None:
            zeta, eps = noise[s]
            theta = q.mean + q.factors @ zeta + q.diag * eps
        else:
            theta, (zeta, eps) = sample_reparam(q, rng)
        lp, g = log_target(theta)
        if not (np.isfinite(lp) and np.all(np.isfinite(g))):
            rejected += 1
            if noise is not None or (attempts >= 4 and rejected > 0.5 * attempts):
                raise VbError("more than half of the variational draws gave a non-finite target")
            continue
        val += lp
        g_m += g
        g_b += np.outer(g, zeta)
        g_d += g * eps
        s += 1
    g_m /= s_count
    g_b /= s_count
    g_d = g_d / s_count * q.diag
    hb, hd = entropy_gradients(q)
    return ElboGradient(g_m, g_b + hb, g_d + hd, val / s_count + q.entropy(), rejected)


class Adam:
    """Adam ascent on a dict of named arrays."""

    def __init__(self, params: dict[str, np.ndarray], config: SgaConfig, lr: dict[str, float] | None = None):
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.lr = {k: config.lr for k in params} if lr is None else dict(lr)
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        c = self.config
        self.t += 1
        out = {}
        for k, g in grads.items():
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            mhat = self.m[k] / (1.0 - c.beta1**self.t)
            vhat = self.v[k] / (1.0 - c.beta2**self.t)
            out[k] = params[k] + self.lr[k] * mhat / (np.sqrt(vhat) + c.adam_eps)
        return out


class WindowMonitor:
    """Windowed ELBO averages, Polyak-averaged iterates, convergence and divergence checks."""

    def __init__(self, config: SgaConfig):
        self.config = config
        self.trace = ElboTrace(window=config.window)
        self._buf: list[float] = []
        self._acc: dict[str, np.ndarray] | None = None
        self.best_value = -np.inf
        self.best_params: dict[str, np.ndarray] | None = None
        self._stall = 0
        self._down = 0
        self._down_start = -np.inf
        self._history: list[tuple[float, dict[str, np.ndarray]]] = []

    def update(self, elbo: float, params: dict[str, np.ndarray]) -> bool:
        """Record one iteration; return True when optimisation should stop."""
        c = self.config
        self.trace.noisy.append(float(elbo))
        self.trace.n_iter += 1
        self._buf.append(float(elbo))
        if self._acc is None:
            self._acc = {k: v.copy() for k, v in params.items()}
        else:
            for k, v in params.items():
                self._acc[k] += v
        if len(self._buf) < c.window:
            return False
        avg = float(np.mean(self._buf))
        avg_params = {k: v / len(self._buf) for k, v in self._acc.items()}
        self._buf = []
        self._acc = None
        prev = self.trace.smoothed[-1] if self.trace.smoothed else -np.inf
        self.trace.smoothed.append(avg)
        if not np.isfinite(avg):
            raise VbError("non-finite windowed ELBO")
        if avg < prev:
            if self._down == 0:
                self._down_start = prev
            self._down += 1
        else:
            self._down = 0
        scale = max(abs(self.best_value), 1.0) if np.isfinite(self.best_value) else 1.0
        if (self._down >= c.divergence_windows
                and self._down_start - avg > 25.0 * c.tol * scale):
            raise VbError(f"ELBO diverging: {self._down} consecutive decreasing windows")
        if avg > self.best_value + c.tol * scale or self.best_params is None:
            self._stall = 0
        else:
            self._stall += 1
        self._history.append((avg, avg_params))
        if avg > self.best_value:
            self.best_value = avg
            self.best_params = avg_params
        if self.trace.n_iter >= c.min_iter and self._stall >= c.patience:
            self.trace.converged = True
            return True
        return False

    def result(self, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Polyak average of the iterates over the trailing ``average_windows`` windows."""
        if not self._history:
            return params
        tail = [p for _, p in self._history[-self.config.average_windows:]]
        return {k: np.mean([p[k] for p in tail], axis=0) for k in tail[0]}


def _q_params(q: GaussianFactorVariational) -> dict[str, np.ndarray]:
    return {"mean": q.mean.copy(), "factors": q.factors.copy(), "log_diag": np.log(q.diag)}


def _q_from(params: dict[str, np.ndarray]) -> GaussianFactorVariational:
    return GaussianFactorVariational(params["mean"].copy(), params["factors"].copy(),
                                     np.exp(params["log_diag"]))


def sga_optimize(q0: GaussianFactorVariational, log_target: LogTarget, config: SgaConfig = SgaConfig(),
                 rng: np.random.Generator | None = None,
                 on_step: Callable[[GaussianFactorVariational], None] | None = None
                 ) -> tuple[GaussianFactorVariational, ElboTrace]:
    """Maximise the ELBO; returns the tail-averaged iterate and the trace."""
    rng = rng or np.random.default_rng()
    params = _q_params(q0)
    if config.lr == 0.0:
        return q0, ElboTrace(converged=True)
    opt = Adam(params, config)
    mon = WindowMonitor(config)
    for _ in range(config.max_iter):
        q = _q_from(params)
        if on_step is not None:
            on_step(q)
        g = elbo_gradient(q, log_target, config, rng)
        mon.trace.rejected_draws += g.rejected
        new = opt.step(params, {"mean": g.mean, "factors": g.factors, "log_diag": g.log_diag})
        if all(np.all(np.isfinite(v)) for v in new.values()):
            params = new
        if mon.update(g.elbo, params):
            break
    return _q_from(mon.result(params)), mon.trace


def with_config(config: SgaConfig, **kw) -> SgaConfig:
    return replace(config, **kw)
