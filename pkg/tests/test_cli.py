import json
import os
import subprocess
import sys

from binopt.cli import main
from binopt.landscape import read_grid_csv
from conftest import tiny_config
from binopt.config import save_config


def test_landscape_commands(tmp_path, capsys):
    main(["landscape", "--mode", "toy", "--out", str(tmp_path), "--steps", "200"])
    assert "adam" in capsys.readouterr().out
    main(["landscape", "--mode", "surface", "--out", str(tmp_path), "--resolution", "11"])
    xs, ys, v = read_grid_csv(tmp_path / "surface_discrete.csv")
    assert v.shape == (11, 11)
    assert sum(1 for _ in open(tmp_path / "trajectory_sgd.csv")) == 202


def test_train_slice_metrics(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.json"
    save_config(tiny_config(), cfg)
    monkeypatch.setenv("BINOPT_SEED", "4")
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
    summary = json.load(open(tmp_path / "run" / "summary.json"))
    assert summary["seed"] == 4
    ck = str(tmp_path / "run" / "checkpoints" / "final.ckpt")
    main(["slice", "--checkpoint", ck, "--resolution", "3", "--batch", "16"])
    assert os.path.exists(tmp_path / "run" / "checkpoints" / "slice.csv")
    capsys.readouterr()
    main(["metrics", "--checkpoint", ck])
    report = json.loads(capsys.readouterr().out)
    assert len(report["weight_histogram"]) == 80 and "c2i_ratio" in report


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "binopt", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "compare-optimizers" in out.stdout
