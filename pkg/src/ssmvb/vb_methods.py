"""Variational methods for the UCSV model.

LSND: Gaussian factor approximation for theta only; the states are integrated
out by drawing them from their exact conditional with one warm-started Gibbs
sweep per gradient step.

QNK: independent Gaussians for theta and for the interleaved path
(mu_1, h_1, mu_2, h_2, ...), the latter with a lower-banded Cholesky factor.

CY: coordinate ascent for the random-walk stochastic volatility model
y_t = exp(h_t / 2) u_t, h_t = h_{t-1} + sigma_h eta_t, with
q(sigma_h^2) = IG, q(h_0) = N, q(h) = N(m, K^-1), K tridiagonal.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import _kernels as K
from .mcmc import ChainState, initial_state, state_chain, sweep, theta_to_pars
from .ucsv import (
    DEFAULT_PRIOR, PriorSpec, UcsvParams, UnconstrainedTarget, _from_u, ar1_logdensity, ar_gradient_u,
    ar1_state_gradient, from_unconstrained_batch, measurement_loglik, to_unconstrained,
)
from .vb_engine import (
    Adam, ElboTrace, GaussianFactorVariational, SgaConfig, VbError, WindowMonitor, entropy_gradients,
    sga_optimize,
)

QNK_BANDWIDTH = 3


@dataclass
class StateMarginals:
    mu_mean: np.ndarray
    mu_var: np.ndarray
    sd_mean: np.ndarray      # E[exp(h_t / 2)]
    h_mean: np.ndarray
    h_var: np.ndarray


@dataclass
class FitResult:
    method: str
    q_theta: object
    q_states: object
    elbo_trace: ElboTrace
    wall_time: float
    extra: dict = field(default_factory=dict)


def _crude_theta(y: np.ndarray) -> UcsvParams:
    v = max(float(np.var(y)), 1e-6)
    return UcsvParams(float(np.mean(y)), 0.5, float(np.sqrt(0.3 * v)), float(np.log(0.5 * v)), 0.8, 0.3)


class ThetaSampler:
    """Draws model parameters from a Gaussian approximation in unconstrained space."""

    def __init__(self, q: GaussianFactorVariational):
        self.q = q

    def __call__(self, rng: np.random.Generator) -> np.ndarray:
        u = self.q.sample(rng, 1)[0]
        return from_unconstrained_batch(u)[0]

    def batch(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return from_unconstrained_batch(self.q.sample(rng, size))


# ---------------------------------------------------------------- LSND

@dataclass(frozen=True)
class LsndConfig:
    # the monitored objective is the complete-data joint, which is not monotone,
    # so only non-finite values abort
    sga: SgaConfig = SgaConfig(max_iter=8000, min_iter=4000, average_windows=10, divergence_windows=10**9)
    n_factors: int = 1
    state_burn: int = 100
    init_scale: float = 0.1
    prior: PriorSpec = DEFAULT_PRIOR


class _LsndTarget:
    """u -> log p(y, x | theta(u)) + log p(theta(u)) + log|J|, with x refreshed by
    one Gibbs sweep at theta(u) before evaluation."""

    def __init__(self, y: np.ndarray, state: ChainState, rng: np.random.Generator, prior: PriorSpec):
        self.y = y
        self.state = state
        self.rng = rng
        self.prior_target = UnconstrainedTarget(prior)

    def __call__(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        theta, _ = _from_u(u)
        if not np.all(np.isfinite(theta)) or theta[2] <= 0.0 or theta[5] <= 0.0:
            return -np.inf, np.full(6, np.nan)
        pars = theta_to_pars(theta)
        self.state.pars = pars
        sweep(self.y, self.state, self.rng, update_theta=False)
        mu, h = self.state.mu, self.state.h
        val, grad = self.prior_target.prior_terms(u)
        val += measurement_loglik(self.y, mu, h)
        val += ar1_logdensity(mu, pars[0], pars[1], pars[2]) + ar1_logdensity(h, pars[3], pars[4], pars[5])
        grad = grad.copy()
        grad[:3] += ar_gradient_u(mu, pars[0], pars[1], pars[2])
        grad[3:] += ar_gradient_u(h, pars[3], pars[4], pars[5])
        return float(val), grad


def fit_lsnd(y: np.ndarray, config: LsndConfig = LsndConfig(), rng: np.random.Generator | None = None,
             init_q: GaussianFactorVariational | None = None, init_state: ChainState | None = None) -> FitResult:
    y = np.asarray(y, dtype=float)
    rng = rng or np.random.default_rng()
    t0 = time.perf_counter()
    rng_states, rng_grad = rng.spawn(2)
    if init_q is None:
        init_q = GaussianFactorVariational.isotropic(to_unconstrained(_crude_theta(y)), config.n_factors,
                                                     config.init_scale)
    if init_state is None:
        init_state = initial_state(y, UcsvParams.from_array(from_unconstrained_batch(init_q.mean)[0]))
        for _ in range(config.state_burn):
            sweep(y, init_state, rng_states, update_theta=False)
    state = init_state.copy()
    target = _LsndTarget(y, state, rng_states, config.prior)
    q, trace = sga_optimize(init_q, target, config.sga, rng_grad)
    return FitResult("lsnd", q, None, trace, time.perf_counter() - t0, {"state": state})


def lsnd_state_marginals(y: np.ndarray, q: GaussianFactorVariational, n_iter: int, n_burn: int,
                         rng: np.random.Generator, init: ChainState | None = None) -> StateMarginals:
    """Monte Carlo marginals of the states under q(theta) p(x | y, theta)."""
    rng_states, rng_theta = rng.spawn(2)
    out = state_chain(y, ThetaSampler(q), n_iter, n_burn, rng_states, rng_theta, init)
    _, _, _, mu_mean, sd_mean, h_mean, _ = out
    nan = np.full(len(y), np.nan)
    return StateMarginals(mu_mean, nan, sd_mean, h_mean, nan.copy())


# ---------------------------------------------------------------- QNK

@dataclass(frozen=True)
class QnkConfig:
    sga: SgaConfig = SgaConfig(max_iter=20000, min_iter=4000)
    n_factors: int = 1
    init_state_scale: float = 0.1
    init_theta_scale: float = 0.1
    prior: PriorSpec = DEFAULT_PRIOR


@dataclass
class QnkStates:
    """q(x) = N(mean, C C') over x = (mu_1, h_1, ..., mu_n, h_n); C lower banded.

    ``bands[k - 1, i]`` holds C[i, i - k] for k = 1..3; ``log_diag`` holds log C[i, i].
    """
    mean: np.ndarray
    bands: np.ndarray
    log_diag: np.ndarray

    @property
    def n(self) -> int:
        return self.mean.size // 2

    def apply(self, xi: np.ndarray) -> np.ndarray:
        out = np.exp(self.log_diag) * xi
        for k in range(1, QNK_BANDWIDTH + 1):
            out[k:] += self.bands[k - 1, k:] * xi[:-k]
        return out

    def marginal_var(self) -> np.ndarray:
        return np.exp(2.0 * self.log_diag) + np.sum(self.bands**2, axis=0)

    def marginals(self) -> StateMarginals:
        v = self.marginal_var()
        mu_m, h_m = self.mean[0::2], self.mean[1::2]
        mu_v, h_v = v[0::2], v[1::2]
        return StateMarginals(mu_m.copy(), mu_v, np.exp(0.5 * h_m + h_v / 8.0), h_m.copy(), h_v)

    def last_state(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of (mu_n, h_n)."""
        i, j = self.mean.size - 2, self.mean.size - 1
        row_i = self._row(i)
        row_j = self._row(j)
        cov = np.empty((2, 2))
        cov[0, 0] = sum(v * v for v in row_i.values())
        cov[1, 1] = sum(v * v for v in row_j.values())
        cov[0, 1] = cov[1, 0] = sum(row_i[l] * row_j[l] for l in row_i if l in row_j)
        return self.mean[[i, j]].copy(), cov

    def _row(self, i: int) -> dict[int, float]:
        row = {i: float(np.exp(self.log_diag[i]))}
        for k in range(1, QNK_BANDWIDTH + 1):
            if i - k >= 0:
                row[i - k] = float(self.bands[k - 1, i])
        return row

    def sample_last(self, rng: np.random.Generator, size: int) -> np.ndarray:
        m, cov = self.last_state()
        return rng.multivariate_normal(m, cov, size=size, method="cholesky")

    def extend(self, theta: np.ndarray, y_new: float, scale: float) -> "QnkStates":
        """Append one time step with a transition-based mean for the new states."""
        mu_p = theta[0] + theta[1] * (self.mean[-2] - theta[0])
        h_p = theta[3] + theta[4] * (self.mean[-1] - theta[3])
        w = theta[2] ** 2 / (theta[2] ** 2 + np.exp(h_p))
        mean = np.append(self.mean, [mu_p + w * (y_new - mu_p), h_p])
        bands = np.concatenate([self.bands, np.zeros((QNK_BANDWIDTH, 2))], axis=1)
        log_diag = np.append(self.log_diag, [np.log(scale), np.log(scale)])
        return QnkStates(mean, bands, log_diag)


def qnk_initial_states(y: np.ndarray, scale: float) -> QnkStates:
    st = initial_state(y)
    mean = np.empty(2 * y.size)
    mean[0::2] = st.mu
    mean[1::2] = st.h
    return QnkStates(mean, np.zeros((QNK_BANDWIDTH, 2 * y.size)), np.full(2 * y.size, np.log(scale)))


class _QnkObjective:
    def __init__(self, y: np.ndarray, prior: PriorSpec):
        self.y = y
        self.prior_target = UnconstrainedTarget(prior)

    def __call__(self, u: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        theta, _ = _from_u(u)
        if not np.all(np.isfinite(theta)) or theta[2] <= 0.0 or theta[5] <= 0.0 or not np.all(np.isfinite(x)):
            return -np.inf, None, None
        pars = theta_to_pars(theta)
        mu, h = x[0::2], x[1::2]
        y = self.y
        r = y - mu
        eh = np.exp(-h)
        val, gu = self.prior_target.prior_terms(u)
        val += measurement_loglik(y, mu, h)
        val += ar1_logdensity(mu, pars[0], pars[1], pars[2]) + ar1_logdensity(h, pars[3], pars[4], pars[5])
        gu = gu.copy()
        gu[:3] += ar_gradient_u(mu, pars[0], pars[1], pars[2])
        gu[3:] += ar_gradient_u(h, pars[3], pars[4], pars[5])
        gx = np.empty_like(x)
        gx[0::2] = r * eh + ar1_state_gradient(mu, pars[0], pars[1], pars[2])
        gx[1::2] = -0.5 + 0.5 * r * r * eh + ar1_state_gradient(h, pars[3], pars[4], pars[5])
        return float(val), gu, gx


def _qnk_pack(q: GaussianFactorVariational, s: QnkStates) -> dict[str, np.ndarray]:
    return {"mean": q.mean.copy(), "factors": q.factors.copy(), "log_diag": np.log(q.diag),
            "x_mean": s.mean.copy(), "x_bands": s.bands.copy(), "x_log_diag": s.log_diag.copy()}


def _qnk_unpack(p: dict[str, np.ndarray]) -> tuple[GaussianFactorVariational, QnkStates]:
    q = GaussianFactorVariational(p["mean"].copy(), p["factors"].copy(), np.exp(p["log_diag"]))
    return q, QnkStates(p["x_mean"].copy(), p["x_bands"].copy(), p["x_log_diag"].copy())


_THETA_KEYS = ("mean", "factors", "log_diag")
_STATE_KEYS = ("x_mean", "x_bands", "x_log_diag")


def fit_qnk(y: np.ndarray, config: QnkConfig = QnkConfig(), rng: np.random.Generator | None = None,
            init_q: GaussianFactorVariational | None = None, init_states: QnkStates | None = None) -> FitResult:
    y = np.asarray(y, dtype=float)
    rng = rng or np.random.default_rng()
    t0 = time.perf_counter()
    if init_q is None:
        init_q = GaussianFactorVariational.isotropic(to_unconstrained(_crude_theta(y)), config.n_factors,
                                                     config.init_theta_scale)
    if init_states is None:
        init_states = qnk_initial_states(y, config.init_state_scale)
    if init_states.n != y.size:
        raise ValueError("initial state approximation does not match the data length")
    objective = _QnkObjective(y, config.prior)
    params = _qnk_pack(init_q, init_states)
    sga = config.sga
    if sga.lr == 0.0:
        return FitResult("qnk", init_q, init_states, ElboTrace(converged=True), 0.0)
    opt = Adam(params, sga)
    mon = WindowMonitor(sga)
    nx = y.size * 2
    band_mask = np.ones((QNK_BANDWIDTH, nx))
    for k in range(1, QNK_BANDWIDTH + 1):
        band_mask[k - 1, :k] = 0.0
    for _ in range(sga.max_iter):
        q, s = _qnk_unpack(params)
        total = None
        rejected = 0
        for _draw in range(sga.n_samples):
            while True:
                zeta = rng.standard_normal(q.factors.shape[1])
                eps = rng.standard_normal(q.dim)
                xi = rng.standard_normal(nx)
                u = q.mean + q.factors @ zeta + q.diag * eps
                x = s.mean + s.apply(xi)
                val, gu, gx = objective(u, x)
                if np.isfinite(val):
                    break
                rejected += 1
                if rejected > 10 * sga.n_samples:
                    raise VbError("QNK: persistent non-finite target draws")
            g = {"mean": gu, "factors": np.outer(gu, zeta), "log_diag": gu * eps * q.diag,
                 "x_mean": gx, "x_log_diag": gx * xi * np.exp(s.log_diag),
                 "x_bands": np.stack([np.concatenate([np.zeros(k), gx[k:] * xi[:-k]])
                                      for k in range(1, QNK_BANDWIDTH + 1)]), "_val": val}
            if total is None:
                total = g
            else:
                for key in g:
                    total[key] = total[key] + g[key]
        grads = {key: v / sga.n_samples for key, v in total.items() if key != "_val"}
        hb, hd = entropy_gradients(q)
        grads["factors"] = grads["factors"] + hb
        grads["log_diag"] = grads["log_diag"] + hd
        grads["x_log_diag"] = grads["x_log_diag"] + 1.0
        grads["x_bands"] = grads["x_bands"] * band_mask
        elbo = total["_val"] / sga.n_samples + q.entropy() + float(np.sum(s.log_diag)) \
            + 0.5 * nx * np.log(2.0 * np.pi * np.e)
        mon.trace.rejected_draws += rejected
        new = opt.step(params, grads)
        for keys in (_THETA_KEYS, _STATE_KEYS):
            if all(np.all(np.isfinite(new[k])) for k in keys):
                for k in keys:
                    params[k] = new[k]
            else:
                for k in keys:
                    opt.lr[k] *= 0.5
        if mon.update(elbo, params):
            break
    q, s = _qnk_unpack(mon.result(params))
    return FitResult("qnk", q, s, mon.trace, time.perf_counter() - t0)


# ---------------------------------------------------------------- CY

@dataclass(frozen=True)
class CyConfig:
    max_sweeps: int = 500
    tol: float = 1e-7
    ig_shape: float = 1.001
    ig_scale: float = 1.001
    h0_var: float = 1000.0
    newton_iter: int = 50
    max_damping: int = 30


@dataclass
class CyVariational:
    nu: float          # IG shape for sigma_h^2
    s: float           # IG scale
    mu0: float
    s0_sq: float
    m: np.ndarray
    k_diag: np.ndarray
    k_off: np.ndarray

    def h_cov_bands(self) -> tuple[float, np.ndarray, np.ndarray]:
        logdet, vd, vo = K.tridiag_chol_inverse(self.k_diag, self.k_off)
        return logdet, vd, vo

    def marginals(self) -> StateMarginals:
        _, vd, _ = self.h_cov_bands()
        z = np.zeros_like(self.m)
        return StateMarginals(z, z.copy(), np.exp(0.5 * self.m + vd / 8.0), self.m.copy(), vd)

    def sample_sigma2(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.s / rng.standard_gamma(self.nu, size=size)

    def sample_last(self, rng: np.random.Generator, size: int) -> np.ndarray:
        _, vd, _ = self.h_cov_bands()
        return self.m[-1] + np.sqrt(vd[-1]) * rng.standard_normal(size)

    def extend(self) -> "CyVariational":
        a = self.nu / self.s
        kd = self.k_diag.copy()
        kd[-1] += a
        return CyVariational(self.nu, self.s, self.mu0, self.s0_sq, np.append(self.m, self.m[-1]),
                             np.append(kd, a), np.append(self.k_off, -a))


def _dd_bands(n: int) -> tuple[np.ndarray, np.ndarray]:
    d = np.full(n, 2.0)
    d[-1] = 1.0
    return d, np.full(n - 1, -1.0)


def cy_elbo(y: np.ndarray, q: CyVariational, config: CyConfig = CyConfig()) -> float:
    logdet, vd, vo = q.h_cov_bands()
    if not np.isfinite(logdet):
        return -np.inf
    return _cy_elbo_parts(y, q, logdet, vd, vo, config)


def _expected_q(q: CyVariational, vd: np.ndarray, vo: np.ndarray) -> float:
    m = q.m
    dm = np.diff(m)
    return float((m[0] - q.mu0) ** 2 + vd[0] + q.s0_sq
                 + np.sum(dm * dm + vd[1:] + vd[:-1] - 2.0 * vo))


def _cy_elbo_parts(y, q, logdet, vd, vo, config) -> float:
    n = y.size
    y2 = y * y
    e_inv = q.nu / q.s
    e_log = np.log(q.s) - special.digamma(q.nu)
    a, b = config.ig_shape, config.ig_scale
    lik = float(np.sum(-0.5 * np.log(2.0 * np.pi) - 0.5 * q.m - 0.5 * y2 * np.exp(-q.m + 0.5 * vd)))
    trans = -0.5 * n * np.log(2.0 * np.pi) - 0.5 * n * e_log - 0.5 * e_inv * _expected_q(q, vd, vo)
    ph0 = -0.5 * np.log(2.0 * np.pi * config.h0_var) - (q.mu0**2 + q.s0_sq) / (2.0 * config.h0_var)
    psig = a * np.log(b) - special.gammaln(a) - (a + 1.0) * e_log - b * e_inv
    ent_h = 0.5 * n * np.log(2.0 * np.pi * np.e) - 0.5 * logdet
    ent_h0 = 0.5 * np.log(2.0 * np.pi * np.e * q.s0_sq)
    ent_sig = q.nu + np.log(q.s) + special.gammaln(q.nu) - (1.0 + q.nu) * special.digamma(q.nu)
    return float(lik + trans + ph0 + psig + ent_h + ent_h0 + ent_sig)


def _cy_initial(y: np.ndarray, config: CyConfig) -> CyVariational:
    n = y.size
    window = min(25, n)
    local = np.convolve(y * y, np.ones(window) / window, mode="same")
    m = np.log(np.maximum(local, 1e-8 + 1e-4 * np.mean(y * y)))
    nu = config.ig_shape + 0.5 * n
    s = config.ig_scale + 0.5 * n * 0.01
    a = nu / s
    dd, off = _dd_bands(n)
    return CyVariational(nu, s, float(m[0]), 1.0, m, a * dd + 0.5 * y * y * np.exp(-m), a * off)


def _update_h(y: np.ndarray, q: CyVariational, config: CyConfig, log: dict) -> CyVariational:
    n = y.size
    y2 = y * y
    a = q.nu / q.s
    dd, off = _dd_bands(n)
    base = _cy_elbo_parts(y, q, *q.h_cov_bands(), config)
    logdet, vd, vo = q.h_cov_bands()

    def f_m(m):
        d = np.diff(m)
        return float(np.sum(-0.5 * m - 0.5 * y2 * np.exp(-m + 0.5 * vd))
                     - 0.5 * a * ((m[0] - q.mu0) ** 2 + np.sum(d * d)))

    # Newton in m with V fixed (concave)
    m = q.m.copy()
    fm = f_m(m)
    for _ in range(config.newton_iter):
        w = 0.5 * y2 * np.exp(-m + 0.5 * vd)
        dm_q = dd * m
        dm_q[:-1] += off * m[1:]
        dm_q[1:] += off * m[:-1]
        dm_q[0] -= q.mu0
        grad = -0.5 + w - a * dm_q
        step = K.tridiag_solve(a * dd + w, a * off, grad)
        t = 1.0
        improved = False
        for _ls in range(40):
            cand = m + t * step
            fc = f_m(cand)
            if fc >= fm:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        gain = fc - fm
        m, fm = cand, fc
        if gain < 1e-12 * max(abs(fm), 1.0):
            break
    q_m = CyVariational(q.nu, q.s, q.mu0, q.s0_sq, m, q.k_diag, q.k_off)
    after_m = _cy_elbo_parts(y, q_m, logdet, vd, vo, config)
    if after_m < base:
        q_m, after_m = q, base
        log["rejected_mean"] = log.get("rejected_mean", 0) + 1
    # precision: negative Hessian of the expected log joint at m
    kd_new = a * dd + 0.5 * y2 * np.exp(-q_m.m + 0.5 * vd)
    ko_new = a * off
    scale = 1.0
    for attempt in range(config.max_damping):
        cand = CyVariational(q.nu, q.s, q.mu0, q.s0_sq, q_m.m,
                             q.k_diag + scale * (kd_new - q.k_diag), q.k_off + scale * (ko_new - q.k_off))
        val = cy_elbo(y, cand, config)
        if np.isfinite(val) and val >= after_m:
            if attempt:
                log["damped_precision"] = log.get("damped_precision", 0) + 1
            return cand
        scale *= 0.5
    log["rejected_precision"] = log.get("rejected_precision", 0) + 1
    return q_m


def _update_h0(q: CyVariational, config: CyConfig) -> CyVariational:
    a = q.nu / q.s
    prec = 1.0 / config.h0_var + a
    return CyVariational(q.nu, q.s, a * q.m[0] / prec, 1.0 / prec, q.m, q.k_diag, q.k_off)


def _update_sigma(y: np.ndarray, q: CyVariational, config: CyConfig) -> CyVariational:
    _, vd, vo = q.h_cov_bands()
    nu = config.ig_shape + 0.5 * y.size
    s = config.ig_scale + 0.5 * _expected_q(q, vd, vo)
    return CyVariational(nu, s, q.mu0, q.s0_sq, q.m, q.k_diag, q.k_off)


def fit_cy(y: np.ndarray, config: CyConfig = CyConfig(), init: CyVariational | None = None) -> FitResult:
    """Coordinate ascent; the ELBO is recorded after every full sweep."""
    y = np.asarray(y, dtype=float)
    t0 = time.perf_counter()
    q = init if init is not None else _cy_initial(y, config)
    if q.m.size != y.size:
        raise ValueError("initial approximation does not match the data length")
    trace = ElboTrace(window=1)
    log: dict = {}
    prev = cy_elbo(y, q, config)
    for _ in range(config.max_sweeps):
        q = _update_h(y, q, config, log)
        q = _update_h0(q, config)
        q = _update_sigma(y, q, config)
        val = cy_elbo(y, q, config)
        trace.noisy.append(val)
        trace.smoothed.append(val)
        trace.n_iter += 1
        if abs(val - prev) < config.tol * max(abs(val), 1.0):
            trace.converged = True
            break
        prev = val
    return FitResult("cy", q, q, trace, time.perf_counter() - t0, {"log": log})
