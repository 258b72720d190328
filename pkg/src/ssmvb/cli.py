"""Command line entry point: ``ssmvb <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, lgssm, persist
from .mcmc import McmcConfig, run_mcmc
from .predictive import components, predict_approx, predict_sim
from .scoring import SCORE_COLUMNS
from .ucsv import DGPS, DgpConfig, simulate
from .vb_methods import (
    CyConfig, LsndConfig, QnkConfig, StateMarginals, fit_cy, fit_lsnd, fit_qnk, lsnd_state_marginals,
)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value file mirroring the experiment settings")
    for f in harness.config_fields():
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None,
                       help=f"override '{f.name}' (default {f.default})")


def _config(args) -> harness.ExperimentConfig:
    overrides = {f.name: getattr(args, f.name) for f in harness.config_fields()}
    return harness.load_config(args.config, overrides)


def cmd_simulate(args) -> int:
    if args.dgp in ("1", "2", "3"):
        theta = DGPS[int(args.dgp)]
    else:
        theta = persist.read_theta(Path(args.dgp))
    y, lat = simulate(DgpConfig(theta, args.T, args.seed))
    persist.write_series(args.out, y, lat)
    return 0


def cmd_fit(args) -> int:
    y = persist.read_series(args.data)
    rng = np.random.default_rng(args.seed)
    meta = {"seed": args.seed, "data": args.data, "T": y.size}
    if args.method == "exact":
        fix = persist.read_theta(args.fix_theta) if args.fix_theta else None
        iters = args.iters or 15000
        burn = args.burn if args.burn is not None else iters // 3
        d = run_mcmc(y, McmcConfig(n_iter=iters, n_burn=burn, track_log_joint=False), rng, fix_theta=fix)
        args.out.mkdir(parents=True, exist_ok=True)
        persist.write_draws(args.out / "draws.csv", d)
        nan = np.full(y.size, np.nan)
        persist.write_marginals(args.out / "state_marginals.csv",
                                StateMarginals(d.mu_mean, nan, d.sd_mean, d.h_mean, nan))
        harness.write_metadata(args.out / "run_metadata.txt",
                               {"method": "exact", "estimation_seconds": f"{d.wall_time:.3f}", "iterations": iters,
                                "burn": burn, "acceptance_rho_mu": d.acceptance[0],
                                "acceptance_rho_h": d.acceptance[1], **meta})
        return 0
    if args.method == "cy":
        cfg = CyConfig()
        cfg = dataclasses.replace(cfg, max_sweeps=args.iters or cfg.max_sweeps, tol=args.tol or cfg.tol)
        fit = fit_cy(y, cfg)
        persist.save_fit(args.out, fit, fit.q_states.marginals(), meta)
        return 0
    base = LsndConfig() if args.method == "lsnd" else QnkConfig()
    sga = base.sga
    if args.iters:
        sga = dataclasses.replace(sga, max_iter=args.iters, min_iter=min(sga.min_iter, args.iters))
    if args.tol:
        sga = dataclasses.replace(sga, tol=args.tol)
    cfg = dataclasses.replace(base, sga=sga)
    if args.method == "lsnd":
        fit = fit_lsnd(y, cfg, rng)
        sm = lsnd_state_marginals(y, fit.q_theta, 2000, 200, rng, fit.extra["state"])
    else:
        fit = fit_qnk(y, cfg, rng)
        sm = fit.q_states.marginals()
    persist.save_fit(args.out, fit, sm, meta)
    return 0


def cmd_predict(args) -> int:
    y = persist.read_series(args.data)
    rng = np.random.default_rng(args.seed)
    method, q_theta, q_states = persist.load_fit(args.fit)
    if method == "exact":
        thetas, last_mu, last_h = q_theta
        idx = np.linspace(0, thetas.shape[0] - 1, min(args.J, thetas.shape[0])).round().astype(int)
        pd = components(thetas[idx], last_mu[idx], last_h[idx], rng)
    elif method == "lsnd":
        pd, _ = predict_sim(q_theta, y, args.J, rng)
    else:
        pd = predict_approx(q_theta, q_states, args.J, rng)
    harness.write_csv(args.out, ("n", "component", "mean", "sd"),
                      [(y.size, j + 1, float(m), float(s)) for j, (m, s) in enumerate(zip(pd.means, pd.sds))])
    return 0


def cmd_backtest(args) -> int:
    config = _config(args)
    report = harness.run_backtest(config, progress=True)
    harness.write_reports(Path(config.output_dir), config, backtest=report)
    _print_summary(report.averages())
    return 0


def cmd_state_accuracy(args) -> int:
    config = _config(args)
    report = harness.run_state_accuracy(config)
    harness.write_reports(Path(config.output_dir), config, accuracy=report)
    print("method," + ",".join(harness.AccuracyReport.columns))
    for m, row in report.rows.items():
        print(m + "," + ",".join(f"{v:.5f}" for v in row))
    return 0


def cmd_verify(args) -> int:
    box = lgssm.ParamBox(args.rho_lo, args.rho_hi, args.alpha_hi)
    checks = harness.verify_analytics(box, args.grid_step, args.n, args.seed, args.reps)
    harness.write_analytics(checks, args.out)
    failed = [c.name for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return 0


def _print_summary(avgs: dict) -> None:
    print(f"{'method':<10}" + "".join(f"{c:>10}" for c in SCORE_COLUMNS))
    for m, vals in avgs.items():
        print(f"{m:<10}" + "".join(f"{v:>10.4f}" for v in vals))


def cmd_report(args) -> int:
    out = Path(args.dir)
    if (out / "scores.csv").exists():
        report = harness.read_backtest(out)
        avgs = report.averages()
        harness.write_csv(out / "summary.csv", ("method", *SCORE_COLUMNS), [(m, *avgs[m]) for m in report.records])
        _print_summary(avgs)
    if (out / "state_accuracy.csv").exists():
        acc = harness.read_accuracy(out)
        print("\nstate accuracy (rmse_mu, mae_mu, rmse_sd, mae_sd)")
        for m, row in acc.rows.items():
            print(f"{m:<10}" + "".join(f"{v:>10.5f}" for v in row))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmvb", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a series from a data generating process")
    p.add_argument("--dgp", default="2", help="1, 2, 3 or a parameter file")
    p.add_argument("--T", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one method to a series")
    p.add_argument("--method", choices=("exact", "lsnd", "qnk", "cy"), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--iters", type=int)
    p.add_argument("--burn", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fix-theta", type=Path, help="parameter file; exact method only")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="one-step-ahead mixture from a saved fit")
    p.add_argument("--fit", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--J", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("backtest", help="expanding-window predictive evaluation")
    _add_config_flags(p)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("state-accuracy", help="state estimation error against the fixed-parameter reference")
    _add_config_flags(p)
    p.set_defaults(func=cmd_state_accuracy)

    p = sub.add_parser("verify-analytics", help="closed-form checks for the linear Gaussian model")
    p.add_argument("--rho-lo", type=float, default=0.05)
    p.add_argument("--rho-hi", type=float, default=0.95)
    p.add_argument("--alpha-hi", type=float, default=2.0)
    p.add_argument("--grid-step", type=float, default=0.005)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("verify_analytics.csv"))
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="summarise a results directory")
    p.add_argument("dir", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
