"""Compiled inner loops shared by the samplers and the variational methods.

All randomness is drawn by the caller from a ``numpy.random.Generator`` and
passed in, so every kernel is a deterministic function of its arguments.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# Kim, Shephard and Chib seven-component approximation to log chi^2_1
KSC_PROBS = np.array([0.0073, 0.10556, 0.00002, 0.04395, 0.34001, 0.24566, 0.2575])
KSC_MEANS = np.array([-10.12999, -3.97281, -8.56686, 2.77786, 0.61942, 1.79518, -1.08819]) - 1.2704
KSC_VARS = np.array([5.79596, 2.61369, 5.17950, 0.16735, 0.64009, 0.34023, 1.26261])
KSC_OFFSET = 1e-4


@njit(cache=True)
def ffbs_ar1(z, obs_var, c, rho, sig2, init_var, eps, out):
    """Forward filter, backward sample the scalar AR(1) state s_t observed as
    z_t = s_t + N(0, obs_var_t); s_1 ~ N(c, init_var). Writes the draw to ``out``."""
    n = z.size
    m = np.empty(n)
    p = np.empty(n)
    mp = c
    pp = init_var
    for t in range(n):
        s = pp + obs_var[t]
        k = pp / s
        m[t] = mp + k * (z[t] - mp)
        p[t] = pp * obs_var[t] / s
        mp = c + rho * (m[t] - c)
        pp = rho * rho * p[t] + sig2
    out[n - 1] = m[n - 1] + np.sqrt(max(p[n - 1], 0.0)) * eps[n - 1]
    for t in range(n - 2, -1, -1):
        pn = rho * rho * p[t] + sig2
        if pn > 0.0:
            g = rho * p[t] / pn
            mean = m[t] + g * (out[t + 1] - c - rho * (m[t] - c))
            var = p[t] * sig2 / pn
        else:
            mean = m[t]
            var = p[t]
        out[t] = mean + np.sqrt(max(var, 0.0)) * eps[t]


@njit(cache=True)
def smoother_ar1(z, obs_var, c, rho, sig2, init_var):
    """Rauch-Tung-Striebel smoothed means and variances for the ``ffbs_ar1`` model."""
    n = z.size
    m = np.empty(n)
    p = np.empty(n)
    mp = c
    pp = init_var
    for t in range(n):
        s = pp + obs_var[t]
        k = pp / s
        m[t] = mp + k * (z[t] - mp)
        p[t] = pp * obs_var[t] / s
        mp = c + rho * (m[t] - c)
        pp = rho * rho * p[t] + sig2
    ms = m.copy()
    ps = p.copy()
    for t in range(n - 2, -1, -1):
        pn = rho * rho * p[t] + sig2
        if pn > 0.0:
            g = rho * p[t] / pn
            ms[t] = m[t] + g * (ms[t + 1] - c - rho * (m[t] - c))
            ps[t] = p[t] + g * g * (ps[t + 1] - pn)
    return ms, ps


@njit(cache=True)
def ksc_indicators(z, h, u, out):
    """Draw mixture indicators given z_t = log(e_t^2 + c) and h_t."""
    k = KSC_PROBS.size
    w = np.empty(k)
    for t in range(z.size):
        tot = 0.0
        for i in range(k):
            d = z[t] - h[t] - KSC_MEANS[i]
            w[i] = KSC_PROBS[i] * np.exp(-0.5 * d * d / KSC_VARS[i]) / np.sqrt(KSC_VARS[i])
            tot += w[i]
        target = u[t] * tot
        acc = 0.0
        pick = k - 1
        for i in range(k):
            acc += w[i]
            if target < acc:
                pick = i
                break
        out[t] = pick


@njit(cache=True)
def ar_suffstats(x, c):
    d0 = x[0] - c
    sxx = 0.0
    sxy = 0.0
    syy = 0.0
    for t in range(1, x.size):
        a = x[t - 1] - c
        b = x[t] - c
        sxx += a * a
        sxy += a * b
        syy += b * b
    return d0 * d0, sxx, sxy, syy


@njit(cache=True)
def ar_rho_logpost(rho, s0, sxx, sxy, syy, sig2):
    if rho <= 0.0 or rho >= 1.0:
        return -np.inf
    ss = (1.0 - rho * rho) * s0 + syy - 2.0 * rho * sxy + rho * rho * sxx
    return 0.5 * np.log(1.0 - rho * rho) - ss / (2.0 * sig2)


@njit(cache=True)
def _update_ar_block(x, pars, i0, prior_mean, prior_var, ig_a, ig_b, step, z_c, z_prop, u_acc, gam):
    """Gibbs for the mean, random-walk MH for rho, Gibbs for sigma^2.
    ``pars[i0:i0+3]`` holds (c, rho, sig2) and is updated in place."""
    n = x.size
    c = pars[i0]
    rho = pars[i0 + 1]
    sig2 = pars[i0 + 2]
    # mean
    s_inn = 0.0
    for t in range(1, n):
        s_inn += x[t] - rho * x[t - 1]
    prec = ((1.0 - rho * rho) + (n - 1) * (1.0 - rho) ** 2) / sig2 + 1.0 / prior_var
    num = ((1.0 - rho * rho) * x[0] + (1.0 - rho) * s_inn) / sig2 + prior_mean / prior_var
    c = num / prec + z_c / np.sqrt(prec)
    # rho
    s0, sxx, sxy, syy = ar_suffstats(x, c)
    prop = rho + step * z_prop
    accepted = 0
    if 0.0 < prop < 1.0:
        lr = ar_rho_logpost(prop, s0, sxx, sxy, syy, sig2) - ar_rho_logpost(rho, s0, sxx, sxy, syy, sig2)
        if np.log(u_acc) < lr:
            rho = prop
            accepted = 1
    # variance
    ss = (1.0 - rho * rho) * s0 + syy - 2.0 * rho * sxy + rho * rho * sxx
    sig2 = (ig_b + 0.5 * ss) / gam
    pars[i0] = c
    pars[i0 + 1] = rho
    pars[i0 + 2] = sig2
    return accepted


@njit(cache=True)
def gibbs_sweep(y, mu, h, pars, prior, steps, update_theta, eps_mu, u_ind, eps_h, par_norm, par_unif, gam, acc):
    """One systematic-scan sweep of the exact sampler.

    ``pars`` = (mu_bar, rho_mu, sig2_mu, h_bar, rho_h, sig2_h), updated in place.
    ``prior`` = (mu_bar mean, var, h_bar mean, var, IG shape, IG scale).
    ``acc`` receives the two MH acceptance indicators.
    """
    n = y.size
    obs = np.empty(n)
    z = np.empty(n)
    for t in range(n):
        obs[t] = np.exp(h[t])
    rm = pars[1]
    ffbs_ar1(y, obs, pars[0], rm, pars[2], pars[2] / (1.0 - rm * rm), eps_mu, mu)
    acc[0] = 0
    acc[1] = 0
    if update_theta:
        acc[0] = _update_ar_block(mu, pars, 0, prior[0], prior[1], prior[4], prior[5], steps[0],
                                  par_norm[0], par_norm[1], par_unif[0], gam[0])
    for t in range(n):
        e = y[t] - mu[t]
        z[t] = np.log(e * e + 0.0001)
    s = np.empty(n, dtype=np.int64)
    ksc_indicators(z, h, u_ind, s)
    for t in range(n):
        z[t] = z[t] - KSC_MEANS[s[t]]
        obs[t] = KSC_VARS[s[t]]
    rh = pars[4]
    ffbs_ar1(z, obs, pars[3], rh, pars[5], pars[5] / (1.0 - rh * rh), eps_h, h)
    if update_theta:
        acc[1] = _update_ar_block(h, pars, 3, prior[2], prior[3], prior[4], prior[5], steps[1],
                                  par_norm[2], par_norm[3], par_unif[1], gam[1])


@njit(cache=True)
def tridiag_chol_inverse(diag, off):
    """For SPD tridiagonal K (``diag``, ``off``) return log|K|, diag(K^-1) and
    the first off-diagonal of K^-1, via Cholesky and selected inversion."""
    n = diag.size
    l = np.empty(n)
    s = np.empty(max(n - 1, 0))
    logdet = 0.0
    prev = 0.0
    for i in range(n):
        v = diag[i] - (s[i - 1] ** 2 if i > 0 else 0.0)
        if v <= 0.0:
            return np.nan, np.empty(0), np.empty(0)
        l[i] = np.sqrt(v)
        logdet += 2.0 * np.log(l[i])
        if i < n - 1:
            s[i] = off[i] / l[i]
    vd = np.empty(n)
    vo = np.empty(max(n - 1, 0))
    vd[n - 1] = 1.0 / (l[n - 1] * l[n - 1])
    for i in range(n - 2, -1, -1):
        vo[i] = -s[i] * vd[i + 1] / l[i]
        vd[i] = (1.0 / l[i] - s[i] * vo[i]) / l[i]
    return logdet, vd, vo


@njit(cache=True)
def tridiag_solve(diag, off, rhs):
    """Solve K x = rhs for SPD tridiagonal K."""
    n = diag.size
    l = np.empty(n)
    s = np.empty(max(n - 1, 0))
    for i in range(n):
        v = diag[i] - (s[i - 1] ** 2 if i > 0 else 0.0)
        l[i] = np.sqrt(v)
        if i < n - 1:
            s[i] = off[i] / l[i]
    w = np.empty(n)
    for i in range(n):
        w[i] = (rhs[i] - (s[i - 1] * w[i - 1] if i > 0 else 0.0)) / l[i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        x[i] = (w[i] - (s[i] * x[i + 1] if i < n - 1 else 0.0)) / l[i]
    return x
