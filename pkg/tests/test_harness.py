import hashlib
import math
from pathlib import Path

import numpy as np
import pytest

from odestim.errors import ConfigError, EmptyResults, ParseError
from odestim.harness import (AggregateRow, ExperimentConfig, RunRecord, aggregate,
                             comparison_tables, read_runs, render_tables, run_experiment,
                             run_seed, runs_csv, seed_offset, sweep_tables, with_overrides,
                             write_outputs)

FAST = dict(net_hidden=32, steps=0, lambda_data=0.01)


def record(p, rep=0, kind="white", eta=0.001, status="ok", huber=0.5, system="damped_cubic"):
    return RunRecord(system, "collocation", kind, "mult", eta, rep, rep + 100, status,
                     np.asarray(p, float), huber, 10)


def test_config_defaults_and_validation():
    cfg = ExperimentConfig()
    assert cfg.repetitions == 10 and cfg.intensities == (1e-4, 1e-3, 1e-2, 1e-1)
    assert cfg.kinds == ("white", "pink") and cfg.mode == "mult"
    np.testing.assert_allclose(cfg.initial_guess(), [-0.05, 1, -1, -0.05])
    for bad in (dict(repetitions=0), dict(intensities=(-1.0,)), dict(system="duffing"),
                dict(estimator="sindy"), dict(kinds=("brown",)), dict(mode="x"),
                dict(p_init=(1.0,)), dict(options={"bogus": 1}), dict(huber_delta=0.0),
                dict(options={"net_hidden": 0})):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad)


def test_config_text_round_trip():
    cfg = ExperimentConfig(system="lorenz", kinds=("pink",), intensities=(0.0, 0.5),
                           repetitions=3, mode="add", base_seed=9, p_init=(1.0, 2.0, 3.0),
                           options=dict(FAST, residual="forward"))
    back = ExperimentConfig.from_text(cfg.to_text())
    assert back == cfg


@pytest.mark.parametrize("text", [
    "[experiment]\nrepetitions = two\n",
    "[experiment]\ncolour = red\n",
    "[estimator]\nlearning_rate = 0.1\n",
    "[network]\nhidden = 3\n",
    "no section header\n",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text)


@pytest.mark.parametrize("name", ["damped", "vdp", "lv", "lorenz"])
def test_shipped_configs_parse(name):
    cfg = ExperimentConfig.from_file(Path(__file__).parents[1] / "configs" / f"{name}.cfg")
    assert cfg.repetitions == 10 and cfg.mode == "mult"
    assert cfg.intensities == (1e-4, 1e-3, 1e-2, 1e-1)
    assert len(cfg.tasks()) == 50


def test_run_grid_counts():
    white = ExperimentConfig(kinds=("white",), options=FAST)
    assert len(white.tasks()) == 40
    both = ExperimentConfig(options=FAST)
    assert len(both.tasks()) == 50
    assert len(ExperimentConfig(full_grid=True, options=FAST).tasks()) == 80
    odd = ExperimentConfig(comparison_eta=0.5, repetitions=2, options=FAST)
    assert sorted({(t.kind, t.eta) for t in odd.tasks()}) == sorted(
        [("white", e) for e in (1e-4, 1e-3, 1e-2, 1e-1, 0.5)] + [("pink", 0.5)])
    assert len(with_overrides(both, repetitions=2).tasks()) == 10


def test_seed_derivation_is_documented_hash():
    digest = hashlib.sha256(b"pink|0.001|3").digest()
    assert seed_offset("pink", 1e-3, 3) == int.from_bytes(digest[:4], "big")
    assert run_seed(5, "pink", 1e-3, 3) == 5 + seed_offset("pink", 1e-3, 3)
    seeds = [t.seed for t in ExperimentConfig(options=FAST).tasks()]
    assert len(set(seeds)) == len(seeds)


def test_aggregate_hand_values():
    rows = aggregate([record([1.0, 0, 0, 0], 0), record([3.0, 0, 0, 0], 1)])
    assert len(rows) == 1
    assert rows[0].mean_p[0] == 2.0
    assert rows[0].std_p[0] == pytest.approx(math.sqrt(2))
    single = aggregate([record([1.5, 2, 3, 4])])[0]
    np.testing.assert_array_equal(single.mean_p, [1.5, 2, 3, 4])
    assert not single.std_p.any()


def test_aggregate_failures_and_errors():
    recs = [record([1.0] * 4, 0), record([np.nan] * 4, 1, status="failed", huber=math.nan)]
    row = aggregate(recs)[0]
    assert (row.runs, row.failed) == (1, 1)
    assert np.all(np.isfinite(row.mean_p))
    with pytest.raises(EmptyResults):
        aggregate([])
    with pytest.raises(EmptyResults):
        aggregate([recs[1]])


def test_aggregate_permutation_invariant():
    rng = np.random.default_rng(0)
    recs = [record(rng.normal(size=4), rep, kind, eta)
            for kind in ("white", "pink") for eta in (1e-3, 1e-2) for rep in range(5)]
    base = aggregate(recs)
    for _ in range(5):
        perm = [recs[i] for i in rng.permutation(len(recs))]
        for a, b in zip(base, aggregate(perm)):
            assert a.key == b.key
            np.testing.assert_array_equal(a.mean_p, b.mean_p)
            np.testing.assert_array_equal(a.std_p, b.std_p)


def test_tables_shape():
    recs = [record([-0.1, 2, -2, -0.1], 0, "white", eta) for eta in (1e-4, 1e-3, 1e-2, 1e-1)]
    recs.append(record([-0.1, 2, -2, -0.1], 0, "pink", 1e-3))
    rows = aggregate(recs)
    header, body = sweep_tables(rows)["damped_cubic"]
    assert header == ["eta", "p1", "p2", "p3", "p4"] and len(body) == 4
    header, body = comparison_tables(rows, 1e-3)["damped_cubic"]
    assert header == ["quantity", "true", "white", "pink"]
    assert body[-1][0] == "Huber Loss" and len(body) == 5


def test_render_tables_empty_writes_nothing(tmp_path):
    with pytest.raises(EmptyResults):
        render_tables([], tmp_path)
    assert not any(tmp_path.iterdir())


def test_runs_csv_round_trip_and_parse_errors(tmp_path):
    recs = [record([0.1, 1 / 3, -2.0, 1e-17], 0),
            record([np.nan] * 4, 1, status="failed", huber=math.nan)]
    recs[1].error = "non-finite loss, at step 4"
    path = tmp_path / "runs.csv"
    path.write_text(runs_csv(recs))
    back = read_runs(path)
    np.testing.assert_array_equal(back[0].p_hat, recs[0].p_hat)
    assert back[1].error == recs[1].error and not back[1].ok
    assert runs_csv(back) == runs_csv(recs)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:2] + ["damped_cubic,collocation,white"]) + "\n")
    with pytest.raises(ParseError) as info:
        read_runs(path)
    assert info.value.line == 3
    path.write_text("a,b\n")
    with pytest.raises(ParseError):
        read_runs(path)
    path.write_text("")
    with pytest.raises(EmptyResults):
        read_runs(path)


def test_noiseless_single_run_recovers_truth():
    cfg = ExperimentConfig(system="vdp", estimator="shooting", kinds=("white",),
                           intensities=(0.0,), comparison_eta=0.0, repetitions=1)
    recs = run_experiment(cfg)
    assert len(recs) == 1 and recs[0].ok
    assert abs(recs[0].p_hat[0] / 2.0 - 1) <= 1e-3


def test_end_to_end_outputs_are_deterministic(tmp_path):
    cfg = ExperimentConfig(system="lv", intensities=(0.0, 0.01), comparison_eta=0.01,
                           repetitions=2, options=FAST)
    outs = []
    for name in ("a", "b"):
        plots = []
        recs = run_experiment(cfg, plots=plots)
        assert len(recs) == 6 and all(r.ok for r in recs)
        write_outputs(cfg, recs, plots, tmp_path / name)
        outs.append(tmp_path / name)
    files = sorted(p.name for p in outs[0].iterdir())
    assert files == sorted(["runs.csv", "timings.csv", "aggregate.csv", "config.cfg",
                            "table_sweep.md", "table_sweep.csv",
                            "table_noise_comparison.md", "table_noise_comparison.csv",
                            "plot_lotka_volterra_0.csv", "phase_lotka_volterra_0.csv",
                            "plot_lotka_volterra_0.01.csv", "phase_lotka_volterra_0.01.csv",
                            "plot_lotka_volterra_pink_0.01.csv",
                            "phase_lotka_volterra_pink_0.01.csv"])
    for name in files:
        if name != "timings.csv":
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    plot = (outs[0] / "plot_lotka_volterra_0.csv").read_text().splitlines()
    assert plot[0] == "t,x1_true,x1_noisy,x1_est,x2_true,x2_noisy,x2_est"
    assert len(plot) == 1002
    data = np.loadtxt(outs[0] / "plot_lotka_volterra_0.csv", delimiter=",", skiprows=1)
    err = np.abs(data[:, 3::3] - data[:, 1::3]) / data[:, 1::3].std(axis=0)
    assert err.max() < 0.05
    assert "Huber Loss" in (outs[0] / "table_noise_comparison.md").read_text()
    assert ExperimentConfig.from_file(outs[0] / "config.cfg") == cfg


def test_parallel_matches_serial():
    cfg = ExperimentConfig(system="vdp", kinds=("white",), intensities=(0.01,),
                           comparison_eta=0.01, repetitions=2, options=FAST)
    serial = run_experiment(cfg)
    parallel = run_experiment(cfg, jobs=2)
    assert runs_csv(serial) == runs_csv(parallel)
