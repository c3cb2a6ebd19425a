import json
import os

import numpy as np
import pytest

from provshift.cli import main, parse_sweep


def run(argv):
    return main(argv)


@pytest.fixture()
def synth_dir(tmp_path):
    out = tmp_path / "data"
    code = run(["synth", "--out", str(out), "--n", "1500",
                "--log-alpha", "-0.6", "--subjects", "300", "--seed", "0"])
    assert code == 0
    return out


@pytest.fixture()
def split_dir(tmp_path, synth_dir):
    out = tmp_path / "splits"
    code = run(["split", "--out", str(out),
                "--data", str(synth_dir / "dataset.tsv"),
                "--log-alpha-train", "-0.6", "--log-alpha-val", "-0.6",
                "--sweep", "-0.6:0.6:3", "--seed", "0"])
    assert code == 0
    return out


def test_parse_sweep():
    assert parse_sweep("-1:1:11") == [float(v) for v in np.linspace(-1, 1, 11)]
    assert parse_sweep("0.5") == [0.5]
    with pytest.raises(Exception):
        parse_sweep("1:0:5")
    with pytest.raises(Exception):
        parse_sweep("0:1:1")
    with pytest.raises(Exception):
        parse_sweep("0:1:2:3")


def test_unknown_verb_and_flags_exit_one(capsys):
    assert run(["frobnicate"]) == 1
    assert run(["synth", "--bogus", "1"]) == 1
    assert run([]) == 1


def test_synth_writes_dataset_and_manifest(synth_dir):
    assert (synth_dir / "dataset.tsv").exists()
    manifest = json.loads((synth_dir / "MANIFEST.json").read_text())
    assert manifest["log_alpha_base"] == 10
    assert manifest["n_examples"] == 1500
    assert "config_hash" in manifest


def test_refuses_overwrite_without_force(tmp_path, synth_dir):
    code = run(["synth", "--out", str(synth_dir), "--n", "100",
                "--log-alpha", "0", "--subjects", "10"])
    assert code == 1
    code = run(["synth", "--out", str(synth_dir), "--n", "100",
                "--log-alpha", "0", "--subjects", "10", "--force"])
    assert code == 0


def test_split_outputs(split_dir):
    names = sorted(os.listdir(split_dir))
    assert "train.tsv" in names and "val.tsv" in names
    assert "MANIFEST.json" in names
    tests = [n for n in names if n.startswith("test@")]
    assert len(tests) == 3
    manifest = json.loads((split_dir / "MANIFEST.json").read_text())
    assert manifest["report"]["log_alpha_base"] == 10


def test_split_infeasible_exits_two(tmp_path, synth_dir, capsys):
    out = tmp_path / "bad"
    code = run(["split", "--out", str(out),
                "--data", str(synth_dir / "dataset.tsv"),
                "--log-alpha-train", "6.5", "--log-alpha-val", "0",
                "--sweep", "0"])
    assert code == 2
    err = capsys.readouterr().err
    assert "error" in err


def test_split_missing_file_exits_two(tmp_path):
    code = run(["split", "--out", str(tmp_path / "x"),
                "--data", str(tmp_path / "nope.tsv"),
                "--log-alpha-train", "0", "--log-alpha-val", "0",
                "--sweep", "0"])
    assert code == 2


def test_train_then_stress(tmp_path, synth_dir, split_dir):
    model_dir = tmp_path / "model"
    code = run(["train", "--out", str(model_dir), "--data", str(split_dir),
                "--algorithm", "ERM", "--budget", "60",
                "--hparams", json.dumps({"lr": 1e-2})])
    assert code == 0
    assert (model_dir / "checkpoint.npz").exists()
    trial = json.loads((model_dir / "trial.json").read_text())
    assert trial["status"] == "ok"
    assert 1 <= trial["selected"] <= len(trial["trace"])

    stress_dir = tmp_path / "stress"
    code = run(["stress", "--out", str(stress_dir),
                "--model", str(model_dir / "checkpoint.npz"),
                "--data", str(synth_dir / "dataset.tsv"),
                "--sweep", "-1:1:11"])
    assert code == 0
    lines = (stress_dir / "sweep.csv").read_text().splitlines()
    data_lines = [l for l in lines if not l.startswith("#")]
    assert len(data_lines) == 12  # header + 11 sweep rows
    footer = [l for l in lines if l.startswith("#")]
    assert any("slope=" in l for l in footer)
    assert any("intercept=" in l for l in footer)
    assert any("r2=" in l for l in footer)


def test_benchmark_and_report(tmp_path, capsys):
    cfg = {
        "dataset": {"synthetic": {
            "n": 1200, "log_alpha": -0.6, "d_core": 3, "d_spur": 3,
            "d_noise": 2, "core_strength": 2.0, "spur_strength": 2.0,
            "subjects": 240, "seed": 0}},
        "split": {"log_alpha_train": -0.6, "log_alpha_val": -0.6,
                  "sweep": [-0.6, 0.6]},
        "algorithms": ["ERM", "JTT"],
        "n_trials": 2, "n_seeds": 2, "budget_steps": 30,
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "bench"
    code = run(["benchmark", "--out", str(out), "--config", str(cfg_path)])
    assert code == 0
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("algorithm,wga_mean@-0.6")
    assert len(summary) == 3  # header + 2 algorithms
    assert (out / "dynamics.csv").exists()
    assert (out / "sweep.csv").exists()
    trials = os.listdir(out / "trials")
    assert sum(1 for t in trials if t.startswith("ERM_search_")) == 2
    assert sum(1 for t in trials if t.startswith("JTT_seed_")) == 2
    manifest = json.loads((out / "MANIFEST.json").read_text())
    # per-seed splits are algorithm-invariant
    assert manifest["split_hashes"]["ERM"] == manifest["split_hashes"]["JTT"]

    code = run(["report", "--dir", str(out)])
    assert code == 0
    stdout = capsys.readouterr().out
    assert "ERM" in stdout and "JTT" in stdout


def test_benchmark_determinism(tmp_path):
    cfg = {
        "dataset": {"synthetic": {
            "n": 1000, "log_alpha": -0.6, "d_core": 2, "d_spur": 2,
            "d_noise": 1, "core_strength": 2.0, "spur_strength": 2.0,
            "subjects": 200, "seed": 0}},
        "split": {"log_alpha_train": -0.6, "log_alpha_val": -0.6,
                  "sweep": [-0.6, 0.6]},
        "algorithms": ["ERM"],
        "n_trials": 2, "n_seeds": 2, "budget_steps": 20,
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out1, out2 = tmp_path / "b1", tmp_path / "b2"
    assert run(["benchmark", "--out", str(out1), "--config", str(cfg_path)]) == 0
    assert run(["benchmark", "--out", str(out2), "--config", str(cfg_path)]) == 0
    assert (out1 / "summary.csv").read_bytes() == (out2 / "summary.csv").read_bytes()
    assert (out1 / "sweep.csv").read_bytes() == (out2 / "sweep.csv").read_bytes()


def test_report_missing_dir_exits_two(tmp_path):
    assert run(["report", "--dir", str(tmp_path / "nothing")]) == 2
