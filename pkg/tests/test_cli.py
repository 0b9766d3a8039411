import json
import subprocess
import sys

import pytest

from vqfill import container
from vqfill.cli import run

CONFIG = """
seed: 2
dataset:
  num_runs: 3
  train_runs: 2
  duration: 0.25
  sim_grid: 32
  out_grid: 16
solver:
  dt: 0.00390625
masks:
  - {name: quad, layout: grid, count: 4, mask_side: 4, grid_rows: 2, grid_cols: 2}
  - {name: centre, layout: single, count: 1, mask_side: 8}
model:
  ch: 8
  ch_mult: [1, 2]
  z_dim: 4
  codebook_size: 16
  disc_ndf: 8
  disc_layers: 2
training:
  stage1: {steps: 6, batch_size: 4, gan_start_step: 2}
  stage2: {steps: 4, batch_size: 4, gan_start_step: 2}
evaluation:
  num_samples: 2
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "desk.yaml"
    cfg.write_text(CONFIG)
    p = {k: root / k for k in ("data", "s1", "s2", "report", "figs")}
    p["config"] = cfg
    codes = [
        run(["generate", "--config", str(cfg), "--out", str(p["data"])]),
        run(["train-stage1", "--config", str(cfg), "--data", str(p["data"]), "--out", str(p["s1"])]),
        run(["train-stage2", "--config", str(cfg), "--ckpt", str(p["s1"]), "--mask", "quad", "--out", str(p["s2"])]),
        run(["evaluate", "--config", str(cfg), "--ckpt", str(p["s2"]), "--data", str(p["data"]), "--mask", "quad",
             "--out", str(p["report"])]),
        run(["plot", "--report", str(p["report"]), "--out", str(p["figs"])]),
    ]
    p["codes"] = codes
    return p


def test_full_pipeline(pipeline):
    assert pipeline["codes"] == [0, 0, 0, 0, 0]
    for name in ("spectrum.png", "vorticity_pdf.png", "samples.png", "errors.png"):
        assert (pipeline["figs"] / name).is_file()
    assert container.read(pipeline["report"]).kind == "report"
    assert (pipeline["s1"] / "train_log.jsonl").is_file()
    assert (pipeline["s2"] / "train_log.jsonl").is_file()


def test_manifests(pipeline):
    for key in ("data", "s1", "s2", "report", "figs"):
        m = json.loads((pipeline[key] / "manifest.json").read_text())
        assert {"command", "argv", "version", "config", "seeds", "inputs", "artifacts", "created_utc"} <= set(m)
    m = json.loads((pipeline["s2"] / "manifest.json").read_text())
    assert m["seeds"] == {"global": 2, "dataset_base_seed": 2, "stage1": 2, "stage2": 2}
    assert m["artifacts"]["arrays.bin"] == container.sha256_file(pipeline["s2"] / "arrays.bin")
    assert m["inputs"]["stage1"] == container.read(pipeline["s1"]).meta["payload"]["sha256"]
    assert "quad" in m["config"]


def test_stage2_records_dataset(pipeline):
    ckpt = container.read(pipeline["s2"])
    assert ckpt.attrs["stage"] == 2
    assert ckpt.attrs["data"] == str(pipeline["data"].resolve())


def test_rerun_gives_identical_manifest(pipeline, tmp_path, monkeypatch):
    # Relative --out under two output roots: same argv, same artifacts.
    cfg = str(pipeline["config"])
    manifests = []
    for root in ("a", "b"):
        monkeypatch.setenv("VQFILL_OUT_ROOT", str(tmp_path / root))
        assert run(["train-stage1", "--config", cfg, "--data", str(pipeline["data"]), "--out", "s1"]) == 0
        m = json.loads((tmp_path / root / "s1" / "manifest.json").read_text())
        m.pop("created_utc")
        manifests.append(m)
    assert manifests[0] == manifests[1]
    a = (tmp_path / "a" / "s1" / "train_log.jsonl").read_bytes()
    assert a == (pipeline["s1"] / "train_log.jsonl").read_bytes()


def test_evaluate_without_checkpoint(pipeline, tmp_path, capsys):
    code = run(["evaluate", "--data", str(pipeline["data"]), "--mask", "quad", "--out", str(tmp_path / "r")])
    assert code == 6
    assert "StageMismatchError" in capsys.readouterr().err


def test_evaluate_with_non_checkpoint(pipeline, tmp_path):
    assert run(["evaluate", "--ckpt", str(pipeline["data"]), "--data", str(pipeline["data"]),
                "--out", str(tmp_path / "r")]) == 6


def test_evaluate_with_stage1_checkpoint(pipeline, tmp_path):
    assert run(["evaluate", "--ckpt", str(pipeline["s1"]), "--data", str(pipeline["data"]),
                "--out", str(tmp_path / "r")]) == 6


def test_evaluate_mask_mismatch(pipeline, tmp_path):
    assert run(["evaluate", "--config", str(pipeline["config"]), "--ckpt", str(pipeline["s2"]),
                "--data", str(pipeline["data"]), "--mask", "centre", "--out", str(tmp_path / "r")]) == 6


def test_evaluate_with_baseline(pipeline, tmp_path, capsys):
    from vqfill.dataset import read_container
    from vqfill.evaluation import read_report, write_completions

    data = read_container(pipeline["data"])
    idx = data.indices("test")
    write_completions(tmp_path / "gt", data.frames[idx], idx)
    code = run(["evaluate", "--config", str(pipeline["config"]), "--ckpt", str(pipeline["s2"]),
                "--data", str(pipeline["data"]), "--baseline", f"oracle={tmp_path / 'gt'}", "--out", str(tmp_path / "r")])
    assert code == 0
    assert read_report(tmp_path / "r").summary()["oracle"]["mean"] == 0.0
    assert "oracle" in capsys.readouterr().out
    assert run(["evaluate", "--ckpt", str(pipeline["s2"]), "--data", str(pipeline["data"]),
                "--baseline", "no-equals-sign", "--out", str(tmp_path / "r2")]) == 3


def test_train_stage2_unknown_mask(pipeline, tmp_path):
    assert run(["train-stage2", "--config", str(pipeline["config"]), "--ckpt", str(pipeline["s1"]),
                "--mask", "nope", "--out", str(tmp_path / "x")]) == 3


def test_train_stage2_from_stage2_checkpoint(pipeline, tmp_path):
    assert run(["train-stage2", "--config", str(pipeline["config"]), "--ckpt", str(pipeline["s2"]),
                "--mask", "quad", "--out", str(tmp_path / "x")]) == 6


def test_corrupted_data_exit_code(pipeline, tmp_path):
    import shutil

    shutil.copytree(pipeline["data"], tmp_path / "d")
    raw = bytearray((tmp_path / "d" / "arrays.bin").read_bytes())
    raw[0] = 0
    (tmp_path / "d" / "arrays.bin").write_bytes(bytes(raw))
    assert run(["train-stage1", "--config", str(pipeline["config"]), "--data", str(tmp_path / "d"),
                "--out", str(tmp_path / "x")]) == 4


def test_missing_config_exit_code(tmp_path):
    assert run(["generate", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path / "d")]) == 3


def test_export_mask(pipeline, tmp_path):
    assert run(["export-mask", "--config", str(pipeline["config"]), "--mask", "quad", "--out", str(tmp_path / "m")]) == 0
    m = container.read(tmp_path / "m").array("mask")
    assert m.shape == (16, 16) and m.sum() == 64


@pytest.mark.parametrize("argv", [["frobnicate"], ["generate", "--bogus"], [], ["plot", "--report", "x"]])
def test_usage_errors(argv, capsys):
    assert run(argv) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "vqfill", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("vqfill ")


def test_inputs_not_mutated(pipeline):
    before = container.sha256_file(pipeline["data"] / "arrays.bin")
    meta = (pipeline["data"] / "meta.json").read_bytes()
    assert container.read(pipeline["data"]).meta["payload"]["sha256"] == before
    assert meta == (pipeline["data"] / "meta.json").read_bytes()
