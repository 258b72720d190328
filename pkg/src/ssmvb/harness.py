"""Experiment orchestration: state accuracy, expanding-window backtest, analytics checks, reports."""
from __future__ import annotations

import csv
import dataclasses
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lgssm
from .mcmc import McmcConfig, McmcError, run_mcmc
from .predictive import predict_approx, predict_from_draws, predict_sim
from .scoring import SCORE_COLUMNS, ScoreRecord, score_all, tail_regions
from .ucsv import DGPS, DgpConfig, UcsvParams, from_unconstrained_batch, simulate
from .vb_engine import VbError
from .vb_methods import (
    CyConfig, LsndConfig, QnkConfig, fit_cy, fit_lsnd, fit_qnk, lsnd_state_marginals,
)

log = logging.getLogger(__name__)

METHOD_IDS = {"truedgp": 0, "exact": 1, "lsnd": 2, "cy": 3, "qnk": 4}
METHOD_ORDER = ("truedgp", "exact", "lsnd", "cy", "qnk")
INIT_WINDOW = 1_000_000
MAX_FAILURE_RATE = 0.01


@dataclass
class ExperimentConfig:
    dgp: int = 2
    T: int = 3000
    data_seed: int = 20240
    master_seed: int = 12345
    methods: str = "exact,lsnd,cy,qnk"
    window_start: int = 1000
    horizon_count: int = 500
    refit_every: int = 10
    J: int = 500
    window_burn: int = 50
    mcmc_iter: int = 15000
    mcmc_burn: int = 5000
    exact_init_iter: int = 3000
    exact_init_burn: int = 2000
    exact_refit_burn: int = 300
    lsnd_iter: int = 8000
    lsnd_refit_iter: int = 1000
    lsnd_marginal_iter: int = 5000
    lsnd_marginal_burn: int = 200
    qnk_iter: int = 20000
    qnk_refit_iter: int = 1000
    qnk_update_iter: int = 200
    cy_max_sweeps: int = 500
    output_dir: str = "results"

    def __post_init__(self) -> None:
        if self.window_start < 100:
            raise ValueError("window_start must be >= 100")
        if self.horizon_count < 1:
            raise ValueError("horizon_count must be >= 1")
        if self.window_start + self.horizon_count > self.T:
            raise ValueError("window_start + horizon_count exceeds T")
        if self.dgp not in DGPS:
            raise ValueError(f"unknown dgp {self.dgp}")
        if self.refit_every < 1 or self.J < 1:
            raise ValueError("refit_every and J must be >= 1")
        bad = set(self.method_list) - set(METHOD_IDS)
        if bad:
            raise ValueError(f"unknown methods: {sorted(bad)}")

    @property
    def method_list(self) -> list[str]:
        return [m.strip() for m in self.methods.split(",") if m.strip()]

    @property
    def theta0(self) -> UcsvParams:
        return DGPS[self.dgp]

    def data(self) -> tuple[np.ndarray, object]:
        return simulate(DgpConfig(self.theta0, self.T, self.data_seed))


def config_fields() -> list[dataclasses.Field]:
    return list(dataclasses.fields(ExperimentConfig))


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Read ``key = value`` lines ('#' starts a comment), then apply overrides."""
    values: dict[str, str] = {}
    if path is not None:
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            values[k.replace("-", "_")] = v
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    types = {f.name: f.type for f in config_fields()}
    unknown = set(values) - set(types)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {k: (int(v) if types[k] in ("int", int) else str(v)) for k, v in values.items()}
    return ExperimentConfig(**kwargs)


def dump_config(config: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in config_fields())


def window_rng(master_seed: int, window_index: int, method: str) -> np.random.Generator:
    """Per-task stream keyed by (master seed, window index, method id)."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, window_index, METHOD_IDS[method]]))


# ---------------------------------------------------------------- state accuracy

@dataclass
class AccuracyReport:
    rows: dict[str, tuple[float, float, float, float]] = field(default_factory=dict)
    wall_times: dict[str, float] = field(default_factory=dict)

    columns = ("rmse_mu", "mae_mu", "rmse_sd", "mae_sd")


def _errors(est: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    d = est - ref
    return float(np.sqrt(np.mean(d * d))), float(np.mean(np.abs(d)))


def run_state_accuracy(config: ExperimentConfig) -> AccuracyReport:
    y, _ = config.data()
    report = AccuracyReport()
    mc = McmcConfig(n_iter=config.mcmc_iter, n_burn=config.mcmc_burn, track_log_joint=False)
    t0 = time.perf_counter()
    ref = run_mcmc(y, mc, window_rng(config.master_seed, INIT_WINDOW + 1, "truedgp"), fix_theta=config.theta0)
    report.wall_times["reference"] = time.perf_counter() - t0
    ref_mu, ref_sd = ref.mu_mean, ref.sd_mean
    report.rows["reference"] = (0.0, 0.0, 0.0, 0.0)
    for method in config.method_list:
        rng = window_rng(config.master_seed, INIT_WINDOW + 1, method)
        t0 = time.perf_counter()
        if method == "exact":
            d = run_mcmc(y, mc, rng)
            mu, sd = d.mu_mean, d.sd_mean
        elif method == "lsnd":
            f = fit_lsnd(y, _lsnd_config(config, config.lsnd_iter), rng)
            sm = lsnd_state_marginals(y, f.q_theta, config.lsnd_marginal_iter, config.lsnd_marginal_burn,
                                      rng, f.extra["state"])
            mu, sd = sm.mu_mean, sm.sd_mean
        elif method == "qnk":
            f = fit_qnk(y, _qnk_config(config, config.qnk_iter), rng)
            sm = f.q_states.marginals()
            mu, sd = sm.mu_mean, sm.sd_mean
        elif method == "cy":
            f = fit_cy(y, CyConfig(max_sweeps=config.cy_max_sweeps))
            sm = f.q_states.marginals()
            mu, sd = np.full(y.size, np.nan), sm.sd_mean
        else:
            continue
        report.wall_times[method] = time.perf_counter() - t0
        report.rows[method] = (*_errors(mu, ref_mu), *_errors(sd, ref_sd))
    return report


def _lsnd_config(config: ExperimentConfig, iters: int, warm: bool = False) -> LsndConfig:
    base = LsndConfig()
    if warm:
        sga = dataclasses.replace(base.sga, max_iter=iters, min_iter=iters,
                                  average_windows=max(1, iters // base.sga.window))
    else:
        sga = dataclasses.replace(base.sga, max_iter=iters, min_iter=min(base.sga.min_iter, iters))
    return dataclasses.replace(base, sga=sga)


def _qnk_config(config: ExperimentConfig, iters: int, warm: bool = False) -> QnkConfig:
    base = QnkConfig()
    if warm:
        sga = dataclasses.replace(base.sga, max_iter=iters, min_iter=iters,
                                  window=min(base.sga.window, iters), average_windows=1)
    else:
        sga = dataclasses.replace(base.sga, max_iter=iters, min_iter=min(base.sga.min_iter, iters))
    return dataclasses.replace(base, sga=sga)


# ---------------------------------------------------------------- backtest

@dataclass
class BacktestReport:
    records: dict[str, list[tuple[int, ScoreRecord]]] = field(default_factory=dict)
    failures: dict[str, int] = field(default_factory=dict)
    wall_times: dict[str, float] = field(default_factory=dict)

    def averages(self) -> dict[str, tuple[float, ...]]:
        out = {}
        for m, recs in self.records.items():
            if recs:
                out[m] = tuple(float(v) for v in np.mean([r.as_tuple() for _, r in recs], axis=0))
            else:
                out[m] = tuple(float("nan") for _ in SCORE_COLUMNS)
        return out


class _MethodRunner:
    """Carries warm-start state for one method across windows."""

    def __init__(self, method: str, config: ExperimentConfig, y: np.ndarray):
        self.method = method
        self.config = config
        self.y = y
        self.carry = None
        self.n_carry = 0

    def _rng(self, i: int) -> np.random.Generator:
        return window_rng(self.config.master_seed, i, self.method)

    def predict(self, i: int, n: int):
        c = self.config
        y = self.y[:n]
        rng = self._rng(i)
        refit = i % c.refit_every == 0
        m = self.method
        if m in ("truedgp", "exact", "lsnd"):
            return self._predict_chain(i, n, y, rng, refit)
        if m == "qnk":
            if self.carry is None:
                f = fit_qnk(y, _qnk_config(c, c.qnk_iter), self._rng(INIT_WINDOW))
            else:
                q, s = self.carry
                while s.n < n:
                    s = s.extend(_theta_mean(q), float(self.y[s.n]), QnkConfig().init_state_scale)
                iters = c.qnk_refit_iter if refit else c.qnk_update_iter
                f = fit_qnk(y, _qnk_config(c, iters, warm=True), rng, init_q=q, init_states=s)
            self.carry = (f.q_theta, f.q_states)
            return predict_approx(f.q_theta, f.q_states, c.J, rng)
        if m == "cy":
            init = None
            if self.carry is not None:
                init = self.carry
                while init.m.size < n:
                    init = init.extend()
            f = fit_cy(y, CyConfig(max_sweeps=c.cy_max_sweeps), init=init)
            self.carry = f.q_states
            return predict_approx(None, f.q_states, c.J, rng)
        raise ValueError(m)

    def _predict_chain(self, i, n, y, rng, refit):
        c = self.config
        m = self.method
        rng_fit, rng_pred, rng_ext = rng.spawn(3)
        if self.carry is None:
            init_rng = self._rng(INIT_WINDOW)
            if m == "lsnd":
                f = fit_lsnd(y, _lsnd_config(c, c.lsnd_iter), init_rng)
                self.carry = (f.q_theta, f.extra["state"])
            else:
                fix = c.theta0 if m == "truedgp" else None
                d = run_mcmc(y, McmcConfig(n_iter=c.exact_init_iter, n_burn=c.exact_init_burn,
                                           track_log_joint=False), init_rng, fix_theta=fix)
                self.carry = d.final_state
            self.n_carry = n
        if m == "lsnd":
            q, state = self.carry
        else:
            q, state = None, self.carry
        while state.mu.size < n:
            state = state.extend(rng_ext)
        if m == "lsnd":
            if refit and i > 0:
                f = fit_lsnd(y, _lsnd_config(c, c.lsnd_refit_iter, warm=True), rng_fit, init_q=q, init_state=state)
                q, state = f.q_theta, f.extra["state"]
            pd, state = predict_sim(q, y, c.J, rng_pred, n_burn=c.window_burn, init=state)
            self.carry = (q, state)
            return pd
        if m == "truedgp":
            pd, state = predict_sim(c.theta0, y, c.J, rng_pred, n_burn=c.window_burn, init=state)
            self.carry = state
            return pd
        burn = c.exact_refit_burn if refit and i > 0 else c.window_burn
        d = run_mcmc(y, McmcConfig(n_iter=burn + c.J, n_burn=burn, adapt=False, track_log_joint=False),
                     rng_fit, init=state)
        self.carry = d.final_state
        return predict_from_draws(d, rng_pred)


def _theta_mean(q) -> np.ndarray:
    return from_unconstrained_batch(q.mean)[0]


def run_backtest(config: ExperimentConfig, progress: bool = False) -> BacktestReport:
    y, _ = config.data()
    report = BacktestReport()
    methods = ["truedgp"] + [m for m in METHOD_ORDER if m in config.method_list and m != "truedgp"]
    for method in methods:
        runner = _MethodRunner(method, config, y)
        recs: list[tuple[int, ScoreRecord]] = []
        failures = 0
        t0 = time.perf_counter()
        for i in range(config.horizon_count):
            n = config.window_start + i
            try:
                pd = runner.predict(i, n)
                rec = score_all(pd, float(y[n]), tail_regions(y[:n]))
            except (McmcError, VbError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
                failures += 1
                log.warning("window %d failed for %s: %s", i, method, exc)
                if failures > MAX_FAILURE_RATE * config.horizon_count:
                    raise RuntimeError(f"{method}: too many failed windows ({failures})") from exc
                continue
            recs.append((n + 1, rec))
            if progress and (i + 1) % 50 == 0:
                log.info("%s: %d/%d windows", method, i + 1, config.horizon_count)
        report.records[method] = recs
        report.failures[method] = failures
        report.wall_times[method] = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------- analytics

@dataclass
class AnalyticCheck:
    name: str
    analytic: float
    numeric: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(abs(self.analytic - self.numeric) <= self.tolerance)


def verify_analytics(box: lgssm.ParamBox = lgssm.ParamBox(), grid_step: float = 0.005, n: int = 5000,
                     seed: int = 0, reps: int = 50) -> list[AnalyticCheck]:
    """Closed-form linear Gaussian results against independent numerical routes."""
    from scipy import optimize
    rng = np.random.default_rng(seed)
    checks = []
    star = lgssm.find_theta_star(box, grid_step)
    checks.append(AnalyticCheck("theta_star_rho", box.rho_lo, star.rho, 0.0))
    checks.append(AnalyticCheck("theta_star_alpha", 0.0, star.alpha, 0.0))
    for k in range(5):
        th = lgssm.LgssmParams(float(rng.uniform(box.rho_lo, box.rho_hi)), float(rng.uniform(0.0, box.alpha_hi)))
        res = optimize.minimize_scalar(lambda l: -lgssm.limit_criterion(th, l), bounds=(0.0, 1.0 - 1e-9),
                                       method="bounded", options={"xatol": 1e-12})
        checks.append(AnalyticCheck(f"optimal_lambda_{k}", lgssm.optimal_lambda(th), float(res.x), 1e-6))
        checks.append(AnalyticCheck(f"concentrated_objective_{k}", lgssm.concentrated_objective(th),
                                    lgssm.limit_criterion(th, lgssm.optimal_lambda(th)), 1e-10))
    for k, (a, b) in enumerate([(2.0, -1.0), (2.5, 1.0), (1.3, 0.4)]):
        size = 8 + 4 * k
        mat = np.diag(np.full(size, a)) + np.diag(np.full(size - 1, b), 1) + np.diag(np.full(size - 1, b), -1)
        dense = float(np.linalg.det(mat))
        checks.append(AnalyticCheck(f"tridiag_det_{size}", lgssm.tridiag_det(a, b, b, size), dense,
                                    1e-10 * abs(dense)))
    th = lgssm.LgssmParams(0.6, 0.8)
    _, yy = lgssm.simulate(th, 200, rng)
    checks.append(AnalyticCheck("marginal_loglik_vs_kalman", lgssm.log_marginal_likelihood(th, yy),
                                lgssm.kalman_filter(th, yy).loglik, 1e-8))
    th0 = lgssm.LgssmParams(0.0, 1.0)
    _, yy = lgssm.simulate(th0, 200, rng)
    checks.append(AnalyticCheck("jensen_gap_closed_form_vs_exact_rho0",
                                lgssm.jensen_gap_closed_form(th0, yy), lgssm.jensen_gap_exact(th0, yy), 1e-8))
    for a0 in (0.5, 1.0, 2.0):
        mean, se = lgssm.simulated_gap_rate(lgssm.LgssmParams(0.0, a0), n, reps, rng)
        checks.append(AnalyticCheck(f"gap_rate_alpha_{a0}", lgssm.jensen_gap_limit_case1(a0), mean,
                                    max(3.0 * se, 1e-12)))
    for r0 in (0.3, 0.5, 0.8):
        mean, se = lgssm.simulated_gap_rate(lgssm.LgssmParams(r0, 0.0), n, reps, rng)
        checks.append(AnalyticCheck(f"gap_rate_rho_{r0}", lgssm.jensen_gap_limit_case2(r0), mean,
                                    max(3.0 * se, 1e-12)))
    return checks


# ---------------------------------------------------------------- reports

def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def write_backtest(report: BacktestReport, out: Path) -> None:
    rows = []
    for m in report.records:
        for t, rec in report.records[m]:
            rows.append((m, t, *rec.as_tuple()))
    write_csv(out / "scores.csv", ("method", "t", *SCORE_COLUMNS), rows)
    avgs = report.averages()
    write_csv(out / "summary.csv", ("method", *SCORE_COLUMNS), [(m, *avgs[m]) for m in report.records])


def read_backtest(out: Path) -> BacktestReport:
    _, rows = read_csv(out / "scores.csv")
    report = BacktestReport()
    for row in rows:
        rec = ScoreRecord(*(float(v) for v in row[2:]))
        report.records.setdefault(row[0], []).append((int(row[1]), rec))
    return report


def write_accuracy(report: AccuracyReport, out: Path) -> None:
    write_csv(out / "state_accuracy.csv", ("method", *AccuracyReport.columns),
              [(m, *v) for m, v in report.rows.items()])


def read_accuracy(out: Path) -> AccuracyReport:
    _, rows = read_csv(out / "state_accuracy.csv")
    return AccuracyReport({r[0]: tuple(float(v) for v in r[1:]) for r in rows})


def write_analytics(checks: list[AnalyticCheck], path: Path) -> None:
    write_csv(path, ("check_name", "analytic_value", "numeric_value", "tolerance", "pass"),
              [(c.name, c.analytic, c.numeric, c.tolerance, str(c.passed).lower()) for c in checks])


def write_metadata(path: Path, entries: dict) -> None:
    import numba
    import scipy
    from . import __version__
    base = {
        "package_version": __version__, "python": platform.python_version(), "numpy": np.__version__,
        "scipy": scipy.__version__, "numba": numba.__version__,
        "warm_start": "chains and variational fits are warm-started across windows; "
                      "variational parameters refreshed every refit_every windows",
    }
    base.update(entries)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k} = {v}\n" for k, v in base.items()))


def write_reports(out: Path, config: ExperimentConfig, backtest: BacktestReport | None = None,
                  accuracy: AccuracyReport | None = None, extra: dict | None = None) -> None:
    out = Path(out)
    meta = {f"config.{k}": v for k, v in dataclasses.asdict(config).items()}
    if backtest is not None:
        write_backtest(backtest, out)
        for m, wt in backtest.wall_times.items():
            meta[f"backtest_seconds.{m}"] = f"{wt:.2f}"
            meta[f"backtest_failures.{m}"] = backtest.failures.get(m, 0)
    if accuracy is not None:
        write_accuracy(accuracy, out)
        for m, wt in accuracy.wall_times.items():
            meta[f"estimation_seconds.{m}"] = f"{wt:.2f}"
    meta.update(extra or {})
    write_metadata(out / "run_metadata.txt", meta)
