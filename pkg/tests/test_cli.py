import json

import pytest

from dartlab.cli import main
from dartlab.data import load_csv

TINY = {
    "dataset": {"n": 120},
    "algorithm": {"batch_size": 32, "iterations": 20, "checkpoint_frequency": 10,
                  "train_attack": {"alpha": 0.1, "steps": 2, "step_size": 0.05}},
    "pretrain_iterations": 20,
    "eval_attack": {"alpha": 0.1, "steps": 3, "step_size": 0.0125},
    "trials": 2,
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(TINY))
    return p


def test_gen_data_writes_splits(tmp_path, capsys):
    assert main(["gen-data", "--n", "50", "--out", str(tmp_path)]) == 0
    assert len(load_csv(tmp_path / "target_val.csv")) == 10
    assert len(load_csv(tmp_path / "source.csv")) == 50
    assert main(["gen-data", "--kind", "blobs", "--classes", "3", "--n", "30", "--out", str(tmp_path / "b")]) == 0
    assert load_csv(tmp_path / "b" / "source.csv").n_classes == 3


def test_train_eval_and_alpha_sweep(tmp_path, config, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["algorithm"] == "dart"
    assert main(["gen-data", "--n", "120", "--out", str(tmp_path / "d")]) == 0
    capsys.readouterr()
    ckpt = out / "checkpoints" / "selected.json"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(tmp_path / "d" / "target_test.csv"),
                 "--alpha", "0.1", "--steps", "5"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["robust_acc"] <= res["nat_acc"]
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(tmp_path / "d" / "target_test.csv"),
                 "--alpha", "0"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["robust_acc"] == res["nat_acc"]
    assert main(["alpha-sweep", "--alphas", "0,0.05,0.1,0.2", "--ckpt", f"dart={ckpt}",
                 "--data", str(tmp_path / "d" / "target_test.csv"), "--out", str(tmp_path / "sw")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "alpha,algorithm,nat_acc,robust_acc" and len(lines) == 5
    assert (tmp_path / "sw" / "alpha_sweep.csv").exists()
    # rerunning with a different config into the same directory is refused
    other = tmp_path / "c2.json"
    other.write_text(json.dumps({**TINY, "pretrain_iterations": 30}))
    assert main(["train", "--config", str(other), "--out", str(out)]) == 1
    assert "different config" in capsys.readouterr().err


def test_sweep_reports_best_trial(tmp_path, config, capsys):
    assert main(["sweep", "--config", str(config), "--seed", "3", "--out", str(tmp_path / "s")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["trials"] == 2 and doc["failed"] == 0
    assert (tmp_path / "s" / "metrics.jsonl").exists()


def test_theory_check_exit_codes(tmp_path, capsys):
    inst = tmp_path / "i.json"
    inst.write_text(json.dumps({
        "source": {"points": [0, 1], "labels": [0, 1]},
        "target": {"points": [2, 3], "labels": [0, 1]},
        "perturbations": [[2, 1], [3, 4]],
    }))
    assert main(["theory-check", "--instance", str(inst), "--out", str(tmp_path / "r.json")]) == 0
    assert "0 violations" in capsys.readouterr().out
    assert json.loads((tmp_path / "r.json").read_text())["violations"] == []
    assert main(["theory-check", "--instance", str(tmp_path / "missing.json")]) == 1


def test_bad_inputs_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"algorithm": {"algorithm": "sgd"}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "unknown algorithm" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["alpha-sweep", "--alphas", "a,b"])
