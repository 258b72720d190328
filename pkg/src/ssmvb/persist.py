"""Plain CSV persistence for series, posterior draws and fitted approximations."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .harness import read_csv, write_csv, write_metadata
from .mcmc import PosteriorDraws
from .ucsv import PARAM_NAMES, LatentPaths, UcsvParams
from .vb_engine import ElboTrace, GaussianFactorVariational
from .vb_methods import CyVariational, FitResult, StateMarginals

U_NAMES = ("mu_bar", "logit_rho_mu", "log_sigma2_mu", "h_bar", "logit_rho_h", "log_sigma2_h")


@dataclass(frozen=True)
class GaussianLastState:
    """N(mean, cov) for (mu_n, h_n), as stored after a joint state approximation."""
    mean: np.ndarray
    cov: np.ndarray

    def sample_last(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.multivariate_normal(self.mean, self.cov, size=size, method="cholesky")


def write_series(path: Path, y: np.ndarray, latent: LatentPaths | None = None) -> None:
    n = len(y)
    mu = latent.mu if latent is not None else np.full(n, np.nan)
    h = latent.h if latent is not None else np.full(n, np.nan)
    write_csv(Path(path), ("t", "y", "mu_true", "h_true"),
              [(t + 1, float(y[t]), float(mu[t]), float(h[t])) for t in range(n)])


def read_series(path: Path) -> np.ndarray:
    header, rows = read_csv(Path(path))
    col = header.index("y")
    return np.array([float(r[col]) for r in rows])


def read_theta(path: Path) -> UcsvParams:
    """Parameters from ``name = value`` lines or a one-row CSV with named columns."""
    text = Path(path).read_text()
    if "=" in text:
        vals = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = (s.strip() for s in line.split("=", 1))
                vals[k] = float(v)
        return UcsvParams(**{k: vals[k] for k in PARAM_NAMES})
    header, rows = read_csv(Path(path))
    return UcsvParams(**{k: float(rows[0][header.index(k)]) for k in PARAM_NAMES})


def write_draws(path: Path, draws: PosteriorDraws) -> None:
    rows = [(*th, m, h) for th, m, h in zip(draws.thetas, draws.last_mu, draws.last_h)]
    write_csv(Path(path), (*PARAM_NAMES, "mu_last", "h_last"), rows)


def read_draws(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _, rows = read_csv(Path(path))
    arr = np.array(rows, dtype=float).reshape(-1, len(PARAM_NAMES) + 2)
    return arr[:, :6], arr[:, 6], arr[:, 7]


def write_marginals(path: Path, sm: StateMarginals) -> None:
    write_csv(Path(path), ("t", "mu_mean", "mu_var", "sd_mean", "h_mean", "h_var"),
              [(t + 1, *(float(v[t]) for v in (sm.mu_mean, sm.mu_var, sm.sd_mean, sm.h_mean, sm.h_var)))
               for t in range(sm.h_mean.size)])


def write_trace(path: Path, trace: ElboTrace) -> None:
    write_csv(Path(path), ("iteration", "elbo", "elbo_smoothed"), trace.rows())


def _write_kv(path: Path, items: dict) -> None:
    write_csv(Path(path), ("name", "value"), [(k, float(v)) for k, v in items.items()])


def _read_kv(path: Path) -> dict[str, float]:
    _, rows = read_csv(Path(path))
    return {r[0]: float(r[1]) for r in rows}


def write_q_theta(path: Path, q: GaussianFactorVariational) -> None:
    k = q.factors.shape[1]
    header = ("name", "mean", *(f"factor_{j + 1}" for j in range(k)), "diag")
    write_csv(Path(path), header, [(U_NAMES[i], float(q.mean[i]), *map(float, q.factors[i]), float(q.diag[i]))
                                   for i in range(q.dim)])


def read_q_theta(path: Path) -> GaussianFactorVariational:
    _, rows = read_csv(Path(path))
    arr = np.array([r[1:] for r in rows], dtype=float)
    return GaussianFactorVariational(arr[:, 0].copy(), arr[:, 1:-1].copy(), arr[:, -1].copy())


def save_fit(out: Path, fit: FitResult, marginals: StateMarginals | None, meta: dict) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if fit.method in ("lsnd", "qnk"):
        write_q_theta(out / "q_theta.csv", fit.q_theta)
    if fit.method == "qnk":
        m, cov = fit.q_states.last_state()
        _write_kv(out / "last_state.csv", {"mu_last": m[0], "h_last": m[1], "cov_mu_mu": cov[0, 0],
                                           "cov_mu_h": cov[0, 1], "cov_h_h": cov[1, 1]})
    if fit.method == "cy":
        q: CyVariational = fit.q_states
        _, vd, _ = q.h_cov_bands()
        _write_kv(out / "q_theta.csv", {"ig_shape": q.nu, "ig_scale": q.s, "h0_mean": q.mu0, "h0_var": q.s0_sq})
        _write_kv(out / "last_state.csv", {"h_last": q.m[-1], "var_h_last": vd[-1]})
    if marginals is not None:
        write_marginals(out / "state_marginals.csv", marginals)
    write_trace(out / "elbo_trace.csv", fit.elbo_trace)
    write_metadata(out / "run_metadata.txt", {"method": fit.method, "estimation_seconds": f"{fit.wall_time:.3f}",
                                              "converged": fit.elbo_trace.converged,
                                              "iterations": fit.elbo_trace.n_iter, **meta})


def read_metadata(path: Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = v
    return out


def load_fit(out: Path):
    """Returns (method, q_theta, q_states) sufficient for one-step prediction."""
    out = Path(out)
    method = read_metadata(out / "run_metadata.txt")["method"]
    if method == "exact":
        return method, read_draws(out / "draws.csv"), None
    if method == "lsnd":
        return method, read_q_theta(out / "q_theta.csv"), None
    if method == "qnk":
        kv = _read_kv(out / "last_state.csv")
        cov = np.array([[kv["cov_mu_mu"], kv["cov_mu_h"]], [kv["cov_mu_h"], kv["cov_h_h"]]])
        return method, read_q_theta(out / "q_theta.csv"), GaussianLastState(np.array([kv["mu_last"], kv["h_last"]]), cov)
    if method == "cy":
        th = _read_kv(out / "q_theta.csv")
        kv = _read_kv(out / "last_state.csv")
        q = CyVariational(th["ig_shape"], th["ig_scale"], th["h0_mean"], th["h0_var"], np.array([kv["h_last"]]),
                          np.array([1.0 / kv["var_h_last"]]), np.zeros(0))
        return method, None, q
    raise ValueError(f"unknown fit method {method!r}")


__all__ = ["GaussianLastState", "load_fit", "save_fit", "read_series", "write_series",
           "read_draws", "write_draws", "read_theta", "read_q_theta", "write_q_theta", "read_metadata"]
