import json
import subprocess
import sys

import pytest

from palletmask.cli import main
from palletmask.datasets import read_dataset, write_dataset
from palletmask.reporting import read_csv, read_pgm

TINY = {
    "scenario": {"box_catalog": [[3, 2, 2], [2, 2, 2]], "episode_box_count": 6, "buffer_capacity": 1, "pallet": [6, 6, 6]},
    "noise": {"samples_per_check": 5},
    "mask_train": {"epochs": 2, "batch_size": 8},
    "trainer": {"rollout_length": 8, "num_envs": 2, "hidden": 32, "minibatch_size": 16, "epochs": 1, "total_steps": 32},
    "iteration": {"iterations": 1, "states_per_iteration": 5, "sampling_rate": 0.5, "eval_episodes": 3},
}


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def _metrics(d):
    return json.loads((d / "metrics.json").read_text())


def test_gen_data_count_and_determinism(tmp_path, cfg):
    for name in ("a", "b"):
        assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / name), "--states", "12", "--seed", "3", "--jobs", "1"]) == 0
    a = (tmp_path / "a" / "dataset.jsonl.gz").read_bytes()
    assert a == (tmp_path / "b" / "dataset.jsonl.gz").read_bytes()
    assert len(read_dataset(tmp_path / "a" / "dataset.jsonl.gz")) == 12
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["command"] == "gen-data" and man["seed"] == 3 and man["config"]["scenario"]["pallet"]["length_cells"] == 6
    assert {"started", "finished", "code_version", "outputs"} <= set(man)


def test_gen_data_zero_states(tmp_path, cfg):
    out = tmp_path / "z"
    assert main(["gen-data", "--config", cfg, "--out", str(out), "--states", "0", "--jobs", "1"]) == 0
    assert read_dataset(out / "dataset.jsonl.gz") == []
    assert (out / "manifest.json").exists()


def test_gen_data_jobs_independent(tmp_path, cfg):
    for jobs in ("1", "2"):
        assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / jobs), "--states", "8", "--jobs", jobs,
                     "--policy", "random"]) == 0
    assert (tmp_path / "1" / "dataset.jsonl.gz").read_bytes() == (tmp_path / "2" / "dataset.jsonl.gz").read_bytes()


def test_train_mask_outputs(tmp_path, cfg):
    main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d"), "--states", "10", "--jobs", "1"])
    out = tmp_path / "m"
    assert main(["train-mask", "--config", cfg, "--dataset", str(tmp_path / "d" / "dataset.jsonl.gz"), "--out", str(out)]) == 0
    rows = read_csv(out / "train_report.csv")
    assert list(rows[0]) == ["epoch", "train_loss", "val_loss", "val_iou"] and len(rows) == 2
    assert (out / "mask_model.ckpt").exists() and (out / "train_report.png").stat().st_size > 0
    assert 0 <= _metrics(out)["val_iou"] <= 1


def test_train_mask_empty_dataset(tmp_path, cfg, capsys):
    write_dataset(tmp_path / "e.jsonl", [])
    assert main(["train-mask", "--config", cfg, "--dataset", str(tmp_path / "e.jsonl"), "--out", str(tmp_path / "o")]) == 2
    assert "empty" in capsys.readouterr().err


def test_train_policy_eval_render_replay(tmp_path, cfg):
    tp = tmp_path / "tp"
    assert main(["train-policy", "--config", cfg, "--mask", "heuristic", "--out", str(tp), "--eval-episodes", "3"]) == 0
    curve = read_csv(tp / "curve.csv")
    assert curve[-1]["step"] == 32 and "mean_utilization" in curve[0]
    assert (tp / "curve.png").exists()

    ev = tmp_path / "ev"
    args = ["eval", "--config", cfg, "--policy", str(tp / "policy.ckpt"), "--out", str(ev), "--seed", "9", "--greedy", "--trace"]
    assert main(args) == 0
    m = _metrics(ev)
    assert m["episodes"] == 20 and len(m["utilizations"]) == 20 and len(m["episode_lengths"]) == 20
    assert sum(m["termination_reasons"].values()) == 20

    ev2 = tmp_path / "ev2"
    assert main(args[:6] + [str(ev2)] + args[7:]) == 0
    assert (ev / "metrics.json").read_bytes() == (ev2 / "metrics.json").read_bytes()

    rd = tmp_path / "rd"
    assert main(["render", "--input", str(ev / "trace.json"), "--out", str(rd)]) == 0
    txt = sorted(rd.glob("*.txt"))
    assert len(txt) == sum(m["episode_lengths"])
    first = txt[0].read_text().splitlines()
    assert len(first) == 6 and all(len(line) == 6 for line in first)
    img = read_pgm(sorted(rd.glob("*.pgm"))[0])
    assert img.shape == (48, 48)
    assert list(rd.glob("*.png"))

    rp = tmp_path / "rp"
    assert main(["replay", str(ev / "manifest.json"), "--out", str(rp)]) == 0
    assert (rp / "metrics.json").read_bytes() == (ev / "metrics.json").read_bytes()


def test_replay_train_policy_bitwise(tmp_path, cfg):
    a = tmp_path / "a"
    assert main(["train-policy", "--config", cfg, "--mask", "none", "--out", str(a), "--seed", "2", "--eval-episodes", "2"]) == 0
    b = tmp_path / "b"
    assert main(["replay", str(a / "manifest.json"), "--out", str(b)]) == 0
    assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
    assert (a / "curve.csv").read_bytes() == (b / "curve.csv").read_bytes()
    assert (a / "policy.ckpt").read_bytes() == (b / "policy.ckpt").read_bytes()


def test_iterate_outputs(tmp_path, cfg):
    out = tmp_path / "it"
    assert main(["iterate", "--config", cfg, "--out", str(out), "--jobs", "1"]) == 0
    rep = json.loads((out / "iteration_report.json").read_text())
    assert len(rep["iterations"]) == 2 and (out / "iterations.png").exists()
    assert len(list(out.glob("manifest.json"))) == 1


def test_eval_missing_policy(tmp_path, cfg, capsys):
    missing = tmp_path / "nope.ckpt"
    assert main(["eval", "--config", cfg, "--policy", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scenario": {"unknown": 1}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o"), "--states", "1"]) == 2
    assert "unknown" in capsys.readouterr().err


def test_unwritable_out(tmp_path, cfg):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--config", cfg, "--out", str(blocker / "sub"), "--states", "1"]) == 2


def test_learned_mask_requires_path(tmp_path, cfg):
    assert main(["train-policy", "--config", cfg, "--mask", "learned", "--out", str(tmp_path / "o")]) == 2
    assert main(["train-policy", "--config", cfg, "--mask", "learned:/no/such.ckpt", "--out", str(tmp_path / "o")]) == 2


def test_usage_error_exit_code():
    r = subprocess.run([sys.executable, "-m", "palletmask", "eval"], capture_output=True, text=True)
    assert r.returncode == 2


def test_render_dataset(tmp_path, cfg):
    main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d"), "--states", "3", "--jobs", "1"])
    out = tmp_path / "r"
    assert main(["render", "--input", str(tmp_path / "d" / "dataset.jsonl.gz"), "--out", str(out), "--no-figures"]) == 0
    assert len(list(out.glob("*.pgm"))) == 3 and not list(out.glob("*.png"))
