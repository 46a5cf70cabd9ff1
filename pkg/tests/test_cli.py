import csv

import numpy as np
import pytest

from deconfrec.cli import build_parser, main
from deconfrec.experiment import ResultsTable
from deconfrec.simulation import SimConfig, generate

FAST = ["--set", "sim_users=30", "--set", "sim_items=25", "--set", "grid_K=2",
        "--set", "grid_prior_std=1.0", "--set", "grid_pf_K=3", "--set", "max_epochs=20",
        "--set", "pf_max_iters=20"]


def write_ratings(path, triples):
    path.write_text("".join(f"{u}\t{i}\t{v:g}\n" for u, i, v in triples))


def test_run_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for key in ("sim_users = 300", "grid_K = 1,2,5,10,20,50,100", "split_mode = 'train_val_80_20'",
                "ipw_alpha = 0.25"):
        assert key in out


def test_every_subcommand_has_help():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"run", "fit", "evaluate", "simulate", "sweep"}


def test_run_writes_outputs(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("methods = probabilistic:none, oracle\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")] + FAST) == 0
    table = ResultsTable.read_csv(tmp_path / "o" / "results.csv")
    assert [r.method for r in table.rows] == ["probabilistic:none", "oracle"]
    assert "oracle" in capsys.readouterr().out


def test_run_exit_code_on_failed_method(tmp_path):
    args = ["run", "--out", str(tmp_path / "o"), "--set", "methods=probabilistic:ipw",
            "--set", "ipw_alpha=-1"] + FAST
    assert main(args) == 1
    assert (tmp_path / "o" / "results.csv").exists()


def test_run_bad_override():
    with pytest.raises(SystemExit):
        main(["run", "--set", "no_equals_sign"])
    with pytest.raises(ValueError):
        main(["run", "--set", "unknown_key=1"])


@pytest.mark.parametrize("correction", ["none", "deconfounded", "ipw"])
def test_fit_evaluate_round_trip(tmp_path, capsys, correction):
    w = generate(SimConfig(U=30, I=20, seed=2))
    obs = w.observed
    # external IDs offset so the index map is exercised
    train = [(u + 100, i + 500, v) for u, i, v in zip(obs.rows, obs.cols, obs.vals)]
    write_ratings(tmp_path / "train.tsv", train)
    test = [(u + 100, i + 500, int(w.potential[u, i])) for u, i in np.argwhere(w.exposures == 0)]
    test.append((9999, 500, 3))
    write_ratings(tmp_path / "test.tsv", test)
    model = tmp_path / "model"
    assert main(["fit", "--ratings", str(tmp_path / "train.tsv"), "--correction", correction,
                 "--K", "3", "--pf-K", "3", "--max-epochs", "30", "--out", str(model)]) == 0
    expected = {"none": set(), "deconfounded": {"pf_posterior.csv"},
                "ipw": {"propensities.csv"}}[correction]
    assert {p.name for p in model.iterdir()} == {"outcome_model.txt", "index_map.tsv"} | expected
    assert main(["evaluate", "--ratings", str(tmp_path / "test.tsv"), "--model-dir", str(model),
                 "--clip", "--out", str(tmp_path / "m.csv")]) == 0
    with open(tmp_path / "m.csv") as fh:
        rows = {(r["metric"], r["scope"]): float(r["value"]) for r in csv.DictReader(fh)}
    assert 0 <= rows[("ndcg", "user")] <= 1
    assert 0 <= rows[("mse", "pooled")] <= 16


def test_simulate(tmp_path):
    assert main(["simulate", "--users", "20", "--items", "15", "--seed", "4",
                 "--out", str(tmp_path)]) == 0
    world = np.load(tmp_path / "world.npz")
    w = generate(SimConfig(U=20, I=15, gamma_theta=0.5, seed=4))
    assert np.array_equal(world["potential"], w.potential)
    lines = (tmp_path / "observed.tsv").read_text().splitlines()
    assert len(lines) == int(w.exposures.sum())


def test_small_sweep(tmp_path):
    assert main(["sweep", "--values", "0,1", "--users", "15", "--items", "15", "--runs", "2",
                 "--model-K", "2", "--pf-K", "2", "--max-epochs", "10",
                 "--out", str(tmp_path)]) == 0
    with open(tmp_path / "sweep_runs.csv") as fh:
        recs = list(csv.DictReader(fh))
    assert len(recs) == 2 * 2 * 2 * 2
    assert {r["gamma_theta"] for r in recs} == {"0.0", "1.0"}
    assert (tmp_path / "sweep_summary.csv").exists()
