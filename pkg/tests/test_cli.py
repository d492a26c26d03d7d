import csv

import pytest

from pcn.cli import main

TINY = """
seed = 0
[dataset]
n_train = 160
n_val = 40
[backbone]
trunk_channels = [4, 4, 6]
fused_channels = 6
ppm_channels = 2
[base_training]
epochs = 1
batch_size = 16
[meta_training]
iterations = 3
inner_iters = 3
d = 4
[evaluation]
num_tasks = 2
inner_iters = 3
modes = ["plain", "npf", "nsf", "pcn", "oracle"]
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """gen-data -> train-base on the tiny config, shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train-base", "--config", str(cfg), "--data", str(root / "data" / "dataset"), "--out", str(root / "base")]) == 0
    return root, cfg


def _common(root, cfg):
    return ["--config", str(cfg), "--data", str(root / "data" / "dataset")]


def test_gen_data_is_reproducible(run, tmp_path, capsys):
    root, cfg = run
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "dataset.sha256").read_text() == (root / "data" / "dataset.sha256").read_text()
    assert "sha256" in capsys.readouterr().out


def test_train_base_outputs(run):
    root, _ = run
    for name in ("base.ckpt", "base_loss.csv", "config.toml", "run.json"):
        assert (root / "base" / name).exists()


def test_meta_train_then_eval(run, tmp_path, capsys):
    root, cfg = run
    base = str(root / "base" / "base.ckpt")
    assert main(["meta-train", *_common(root, cfg), "--base", base, "--out", str(tmp_path / "m")]) == 0
    log = list(csv.DictReader(open(tmp_path / "m" / "meta_log_pcn.csv")))
    assert len(log) == 3
    out = tmp_path / "e"
    args = ["eval", *_common(root, cfg), "--base", base, "--calib", str(tmp_path / "m" / "calib_pcn.ckpt"),
            "--out", str(out), "--per-class", "--heatmaps", "1"]
    assert main(args) == 0
    rows = list(csv.DictReader(open(out / "report.csv")))
    assert [r["mode"] for r in rows] == ["plain", "npf", "nsf", "pcn", "oracle"]
    assert float(rows[-1]["h_mean"]) == 1.0
    assert (out / "per_class.csv").exists() and any((out / "heatmaps").iterdir())
    assert "H_mean" in capsys.readouterr().out


def test_eval_without_calibrator_is_config_error(run, tmp_path):
    root, cfg = run
    assert main(["eval", *_common(root, cfg), "--base", str(root / "base" / "base.ckpt"), "--out", str(tmp_path / "x")]) == 2


def test_ablate_features(run, tmp_path):
    root, cfg = run
    assert main(["ablate-features", *_common(root, cfg), "--base", str(root / "base" / "base.ckpt"), "--out", str(tmp_path / "a")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "ablate_features.csv")))
    assert [r["feature"] for r in rows] == ["layer2", "layer3", "layer4", "high", "layer4+high"]


def test_refuses_non_empty_output(run):
    root, cfg = run
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 2


def test_exit_codes(run, tmp_path, capsys):
    root, cfg = run
    bad = tmp_path / "bad.toml"
    bad.write_text("[dataset]\nbogus = 1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "g")]) == 2
    assert main(["train-base", "--config", str(cfg), "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "t")]) == 3
    garbage = tmp_path / "garbage.ckpt"
    garbage.write_bytes(b"junk")
    assert main(["meta-train", *_common(root, cfg), "--base", str(garbage), "--out", str(tmp_path / "m")]) == 3
    assert main(["grad-check", "--seeds", "1", "--tolerance", "0"]) == 4
    assert "error:" in capsys.readouterr().err


def test_grad_check_command(capsys):
    assert main(["grad-check", "--seeds", "2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out and all(line.startswith("PASS") for line in out)
    assert any("calib_pcn_episode" in line for line in out)
