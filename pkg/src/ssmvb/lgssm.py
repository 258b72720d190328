"""Closed-form analytics for the scalar linear Gaussian state space model.

Model, with theta = (rho, alpha) and known sigma0:

    x_1 ~ N(0, sigma0^2)
    x_{t+1} = rho * x_t + sigma0 * eps_t
    y_t = alpha * x_t + sigma0 * eta_t

The variational family for the states is q_lam(x) = N(0, nu(lam) * Phi_n(lam))
with Phi_n(lam)_{ij} = lam^{|i-j|} and nu(lam) = sigma0^2 / (1 - lam^2).

``limit_criterion``, ``optimal_lambda`` and ``concentrated_objective`` follow the
reference closed forms used to locate the variational pseudo-true value. The
``*_exact`` companions carry the exact finite-n algebra and are what the Monte
Carlo checks are run against.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg


@dataclass(frozen=True)
class LgssmParams:
    rho: float
    alpha: float
    sigma0: float = 1.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.rho) and np.isfinite(self.alpha) and np.isfinite(self.sigma0)):
            raise ValueError("parameters must be finite")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if self.sigma0 <= 0.0:
            raise ValueError("sigma0 must be positive")


@dataclass(frozen=True)
class LgssmVariationalParam:
    lam: float
    sigma0: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam < 1.0:
            raise ValueError(f"lambda must lie in [0, 1), got {self.lam}")

    @property
    def nu(self) -> float:
        return self.sigma0**2 / (1.0 - self.lam**2)


@dataclass(frozen=True)
class ParamBox:
    rho_lo: float = 0.05
    rho_hi: float = 0.95
    alpha_hi: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 < self.rho_lo <= self.rho_hi < 1.0:
            raise ValueError("need 0 < rho_lo <= rho_hi < 1")
        if self.alpha_hi < 0.0:
            raise ValueError("alpha_hi must be non-negative")


@dataclass(frozen=True)
class KalmanState:
    filtered_mean: np.ndarray
    filtered_var: np.ndarray
    loglik: float


def tridiag_det(a: float, b: float, c: float, n: int, last: float | None = None) -> float:
    """Determinant of the n x n tridiagonal Toeplitz matrix (a on the diagonal,
    b above, c below).

    With ``last`` the final diagonal entry is replaced by ``last``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    disc = a * a - 4.0 * b * c
    if disc < 0.0:
        raise ValueError("a^2 - 4bc < 0: characteristic roots are complex")
    f = _toeplitz_det(a, b, c, n, disc)
    if last is None:
        return f
    prev = _toeplitz_det(a, b, c, n - 1, disc) if n > 1 else 1.0
    prev2 = _toeplitz_det(a, b, c, n - 2, disc) if n > 2 else 1.0
    if n == 1:
        return float(last)
    return float(last * prev - b * c * prev2)


def _toeplitz_det(a: float, b: float, c: float, n: int, disc: float) -> float:
    if n == 0:
        return 1.0
    d = np.sqrt(disc)
    r1 = 0.5 * (a + d)
    r2 = 0.5 * (a - d)
    if d <= 1e-6 * max(abs(a), 1e-300):
        # (r1^{n+1} - r2^{n+1}) / (r1 - r2) as a geometric sum, exact at d = 0
        k = np.arange(n + 1)
        return float(np.sum(r1**k * r2 ** (n - k)))
    return float((r1 ** (n + 1) - r2 ** (n + 1)) / d)


def omega_matrix(params: LgssmParams, n: int) -> np.ndarray:
    """Dense precision-shape matrix of x given y (scaled by sigma0^2)."""
    diag, off = _omega_bands(params, n)
    out = np.diag(diag)
    if n > 1:
        out += np.diag(off, 1) + np.diag(off, -1)
    return out


def _omega_bands(params: LgssmParams, n: int) -> tuple[np.ndarray, np.ndarray]:
    diag = np.full(n, 1.0 + params.rho**2 + params.alpha**2)
    diag[-1] = 1.0 + params.alpha**2
    off = np.full(n - 1, -params.rho)
    return diag, off


def omega_banded(params: LgssmParams, n: int) -> np.ndarray:
    """Upper banded storage of Omega_n for ``scipy.linalg.solveh_banded``."""
    diag, off = _omega_bands(params, n)
    ab = np.zeros((2, n))
    ab[0, 1:] = off
    ab[1] = diag
    return ab


def phi_matrix(lam: float, n: int) -> np.ndarray:
    return linalg.toeplitz(lam ** np.arange(n, dtype=float))


def log_det_omega(params: LgssmParams, n: int) -> float:
    a = 1.0 + params.rho**2 + params.alpha**2
    r = params.rho
    if n < 400:
        return float(np.log(tridiag_det(a, -r, -r, n, last=1.0 + params.alpha**2)))
    # large n: log-space recursion to avoid overflow
    chol = linalg.cholesky_banded(omega_banded(params, n))
    return float(2.0 * np.sum(np.log(chol[1])))


def trace_omega_phi_exact(params: LgssmParams, lam: float, n: int) -> float:
    r, a2 = params.rho, params.alpha**2
    return n * (1.0 + a2) + (n - 1) * r * r - 2.0 * (n - 1) * r * lam


def limit_criterion(theta: LgssmParams, lam: float) -> float:
    """Large-n per-observation criterion, net of the data constant."""
    nu = theta.sigma0**2 / (1.0 - lam**2)
    return float(-(nu / (2.0 * theta.sigma0**2)) * (1.0 + theta.alpha**2 + theta.rho**2 - theta.rho * lam))


def limit_criterion_exact(theta: LgssmParams, lam: float) -> float:
    """Large-n limit of L_n(theta, lam)/n with the exact trace, net of the data constant."""
    a = 1.0 + theta.alpha**2 + theta.rho**2
    return float(-0.5 * np.log(2.0 * np.pi * theta.sigma0**2) + 0.5
                 - (a - 2.0 * theta.rho * lam) / (2.0 * (1.0 - lam**2)))


def limit_data_constant(theta0: LgssmParams) -> float:
    """-log(2 pi) - E[y_t^2] / (2 sigma0^2) under the stationary law of theta0."""
    s2 = theta0.sigma0**2
    ey2 = s2 * (1.0 + theta0.alpha**2 / (1.0 - theta0.rho**2))
    return float(-np.log(2.0 * np.pi) - ey2 / (2.0 * s2))


def optimal_lambda(theta: LgssmParams) -> float:
    rho, alpha = theta.rho, theta.alpha
    if rho == 0.0:
        raise ValueError("optimal lambda is undefined at rho = 0")
    s = alpha**2 + rho**2
    disc = (s + rho + 1.0) * (s - rho + 1.0)
    return float((s - np.sqrt(disc) + 1.0) / rho)


def _lambda_vec(rho: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    s = alpha**2 + rho**2
    return (s - np.sqrt((s + rho + 1.0) * (s - rho + 1.0)) + 1.0) / rho


def _concentrated_vec(rho: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    s = alpha**2 + rho**2
    root = np.sqrt((s + rho + 1.0) * (s - rho + 1.0))
    lam = (s - root + 1.0) / rho
    return root / (2.0 * (lam**2 - 1.0))


def concentrated_objective(theta: LgssmParams) -> float:
    if theta.rho == 0.0:
        raise ValueError("concentrated objective is undefined at rho = 0")
    return float(_concentrated_vec(np.asarray(theta.rho), np.asarray(theta.alpha)))


def _grid(lo: float, hi: float, step: float) -> np.ndarray:
    count = int(round((hi - lo) / step)) + 1
    return np.linspace(lo, hi, count)


def find_theta_star(box: ParamBox = ParamBox(), grid_step: float = 0.005) -> LgssmParams:
    """Grid argmax of the concentrated objective; ties go to the first grid point."""
    if grid_step <= 0.0:
        raise ValueError("grid_step must be positive")
    rhos = _grid(box.rho_lo, box.rho_hi, grid_step)
    alphas = _grid(0.0, box.alpha_hi, grid_step)
    vals = _concentrated_vec(rhos[:, None], alphas[None, :])
    i, j = np.unravel_index(int(np.argmax(vals)), vals.shape)
    return LgssmParams(rho=float(rhos[i]), alpha=float(alphas[j]))


def simulate(theta: LgssmParams, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw (x, y) of length n."""
    s0 = theta.sigma0
    z = rng.standard_normal((n, 2))
    x = np.empty(n)
    x[0] = s0 * z[0, 0]
    for t in range(1, n):
        x[t] = theta.rho * x[t - 1] + s0 * z[t, 0]
    y = theta.alpha * x + s0 * z[:, 1]
    return x, y


def log_marginal_likelihood(theta: LgssmParams, y: np.ndarray) -> float:
    """log p(y | theta) via a banded solve with Omega_n."""
    y = np.asarray(y, dtype=float)
    n = y.size
    s2 = theta.sigma0**2
    quad = float(y @ y)
    if theta.alpha != 0.0:
        sol = linalg.solveh_banded(omega_banded(theta, n), y)
        quad -= theta.alpha**2 * float(y @ sol)
    return -0.5 * n * np.log(2.0 * np.pi * s2) - 0.5 * log_det_omega(theta, n) - quad / (2.0 * s2)


def elbo_exact(theta: LgssmParams, lam: float, y: np.ndarray) -> float:
    """L_n(theta, lam) = E_q[log p(x, y | theta)] + H(q_lam), in closed form."""
    y = np.asarray(y, dtype=float)
    n = y.size
    s2 = theta.sigma0**2
    nu = s2 / (1.0 - lam**2)
    expected = -n * np.log(2.0 * np.pi * s2) - (nu * trace_omega_phi_exact(theta, lam, n) + y @ y) / (2.0 * s2)
    entropy = 0.5 * n * np.log(2.0 * np.pi * np.e) + 0.5 * (n * np.log(nu) + (n - 1) * np.log(1.0 - lam**2))
    return float(expected + entropy)


def jensen_gap_exact(theta0: LgssmParams, y: np.ndarray, lam: float | None = None) -> float:
    """log p(y | theta0) - L_n(theta0, lam); equals KL(q_lam || p(x | y)) >= 0."""
    lam = theta0.rho if lam is None else lam
    return log_marginal_likelihood(theta0, y) - elbo_exact(theta0, lam, y)


def jensen_gap_closed_form(theta0: LgssmParams, y: np.ndarray) -> float:
    """Reference closed-form Jensen gap Upsilon_n at lam = rho0."""
    y = np.asarray(y, dtype=float)
    n = y.size
    r2, a2 = theta0.rho**2, theta0.alpha**2
    s2 = theta0.sigma0**2
    quad = 0.0
    if a2 != 0.0:
        quad = a2 * float(y @ linalg.solveh_banded(omega_banded(theta0, n), y))
    return float(-0.5 * log_det_omega(theta0, n) + (quad + n * a2 * s2) / (2.0 * s2)
                 - 0.5 * n - 0.5 * n * np.log1p(-r2) + 0.5 * n * (1.0 - r2))


def simulated_gap_rate(theta0: LgssmParams, n: int, reps: int, rng: np.random.Generator) -> tuple[float, float]:
    """Mean and standard error of Upsilon_n / n over ``reps`` simulated series."""
    vals = np.array([jensen_gap_closed_form(theta0, simulate(theta0, n, rng)[1]) / n for _ in range(reps)])
    se = float(vals.std(ddof=1) / np.sqrt(reps)) if reps > 1 else float("nan")
    return float(vals.mean()), se


def jensen_gap_limit_case1(alpha0: float) -> float:
    """Reference large-n limit of Upsilon_n / n at rho0 = 0."""
    a2 = alpha0 * alpha0
    return float(-0.5 * np.log1p(a2) + a2 / (1.0 + a2) + a2)


def jensen_gap_limit_case2(rho0: float) -> float:
    """Reference large-n limit of Upsilon_n / n at alpha0 = 0."""
    r2 = rho0 * rho0
    return float(-0.5 * np.log1p(-r2) - 0.5 + 0.5 * (1.0 - r2))


def kalman_filter(theta: LgssmParams, y: np.ndarray) -> KalmanState:
    y = np.asarray(y, dtype=float)
    n = y.size
    s2 = theta.sigma0**2
    means = np.empty(n)
    variances = np.empty(n)
    m, p = 0.0, s2
    ll = 0.0
    for t in range(n):
        s = theta.alpha**2 * p + s2
        k = theta.alpha * p / s
        resid = y[t] - theta.alpha * m
        ll += -0.5 * (np.log(2.0 * np.pi * s) + resid * resid / s)
        m = m + k * resid
        p = p * s2 / s
        means[t] = m
        variances[t] = p
        m = theta.rho * m
        p = theta.rho**2 * p + s2
    return KalmanState(means, variances, float(ll))


def kl_state_marginal(theta0: LgssmParams, lam_star: float, y: np.ndarray) -> float:
    """KL(pi_n || q_n) between the exact filtering marginal of x_n and the
    variational marginal N(0, sigma0^2 / (1 - lam^2))."""
    ks = kalman_filter(theta0, y)
    m = ks.filtered_mean[-1]
    p = ks.filtered_var[-1]
    v = theta0.sigma0**2 / (1.0 - lam_star**2)
    return float(0.5 * (np.log(v / p) - 1.0 + (p + m * m) / v))
