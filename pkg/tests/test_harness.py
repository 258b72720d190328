import dataclasses

import numpy as np
import pytest

from ssmvb import harness
from ssmvb.harness import ExperimentConfig, load_config
from ssmvb.scoring import ScoreRecord

SMALL = dict(T=260, window_start=200, horizon_count=4, refit_every=2, J=40, window_burn=10,
             mcmc_iter=300, mcmc_burn=100, exact_init_iter=200, exact_init_burn=100, exact_refit_burn=20,
             lsnd_iter=300, lsnd_refit_iter=50, lsnd_marginal_iter=200, lsnd_marginal_burn=50,
             qnk_iter=400, qnk_refit_iter=50, qnk_update_iter=20, cy_max_sweeps=50)


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\ndgp = 3\nmethods = exact, qnk  # trailing\nhorizon-count = 20\n")
    cfg = load_config(p, {"J": "77", "T": None})
    assert (cfg.dgp, cfg.method_list, cfg.horizon_count, cfg.J, cfg.T) == (3, ["exact", "qnk"], 20, 77, 3000)
    assert load_config(None) == ExperimentConfig()
    round_trip = tmp_path / "dump.cfg"
    round_trip.write_text(harness.dump_config(cfg))
    assert load_config(round_trip) == cfg


def test_config_errors(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("nope = 1\n")
    with pytest.raises(ValueError):
        load_config(p)
    p.write_text("dgp 2\n")
    with pytest.raises(ValueError):
        load_config(p)
    with pytest.raises(ValueError):
        ExperimentConfig(methods="exact,foo")
    with pytest.raises(ValueError):
        ExperimentConfig(T=1200, horizon_count=500)


def test_window_streams_are_independent():
    a = harness.window_rng(1, 0, "exact").random()
    assert a == harness.window_rng(1, 0, "exact").random()
    assert a != harness.window_rng(1, 1, "exact").random()
    assert a != harness.window_rng(1, 0, "lsnd").random()


def test_backtest_csv_round_trip(tmp_path):
    rec = ScoreRecord(-1.0, -0.1, -0.2, -0.3, -0.4, -0.5, -0.05, -4.0)
    rep = harness.BacktestReport({"exact": [(11, rec), (12, dataclasses.replace(rec, ls=-2.0))], "qnk": []})
    harness.write_backtest(rep, tmp_path)
    back = harness.read_backtest(tmp_path)
    assert back.records["exact"] == rep.records["exact"]
    avg = rep.averages()
    assert avg["exact"][0] == pytest.approx(-1.5, abs=1e-12)
    assert np.isnan(avg["qnk"]).all()
    header, rows = harness.read_csv(tmp_path / "summary.csv")
    assert header[0] == "method" and [r[0] for r in rows] == ["exact", "qnk"]


def test_header_only_csv_for_empty_report(tmp_path):
    harness.write_backtest(harness.BacktestReport(), tmp_path)
    assert (tmp_path / "scores.csv").read_text().count("\n") == 1


@pytest.fixture(scope="module")
def small_backtest(tmp_path_factory):
    cfg = ExperimentConfig(**SMALL)
    outs = []
    for k in range(2):
        out = tmp_path_factory.mktemp(f"bt{k}")
        rep = harness.run_backtest(cfg)
        harness.write_backtest(rep, out)
        outs.append((rep, out))
    return cfg, outs


def test_small_backtest_shapes_and_determinism(small_backtest):
    cfg, ((rep, out_a), (_, out_b)) = small_backtest
    assert list(rep.records) == ["truedgp", "exact", "lsnd", "cy", "qnk"]
    for m, recs in rep.records.items():
        assert [t for t, _ in recs] == list(range(cfg.window_start + 1, cfg.window_start + cfg.horizon_count + 1))
        assert rep.failures[m] == 0
    for name in ("scores.csv", "summary.csv"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
    avg = rep.averages()
    for m, recs in rep.records.items():
        np.testing.assert_allclose(avg[m], np.mean([r.as_tuple() for _, r in recs], axis=0), rtol=1e-12)


def test_refit_only_at_start():
    cfg = ExperimentConfig(**{**SMALL, "refit_every": SMALL["horizon_count"], "methods": "cy"})
    rep = harness.run_backtest(cfg)
    assert list(rep.records) == ["truedgp", "cy"] and len(rep.records["cy"]) == cfg.horizon_count


def test_state_accuracy_small(tmp_path):
    cfg = ExperimentConfig(**{**SMALL, "T": 300, "methods": "lsnd,cy"})
    rep = harness.run_state_accuracy(cfg)
    assert rep.rows["reference"] == (0.0, 0.0, 0.0, 0.0)
    assert np.isnan(rep.rows["cy"][0]) and np.isfinite(rep.rows["cy"][2])
    harness.write_accuracy(rep, tmp_path)
    assert harness.read_accuracy(tmp_path).rows["lsnd"] == pytest.approx(rep.rows["lsnd"], nan_ok=True)


def test_verify_analytics_rows(tmp_path):
    checks = harness.verify_analytics(n=500, reps=5)
    names = [c.name for c in checks]
    assert names[:2] == ["theta_star_rho", "theta_star_alpha"] and checks[0].passed and checks[1].passed
    assert all(np.isfinite(c.numeric) for c in checks)
    harness.write_analytics(checks, tmp_path / "va.csv")
    header, rows = harness.read_csv(tmp_path / "va.csv")
    assert header == ["check_name", "analytic_value", "numeric_value", "tolerance", "pass"]
    assert len(rows) == len(checks)
