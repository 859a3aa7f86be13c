"""End-to-end CLI behavior: subcommands, artifacts, determinism, exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

from waterflow import netpbm, tensor_io
from waterflow.cli import main
from waterflow.config import RunConfig
from waterflow.imaging import DEPTH_SCALE

SIZE = 32


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    rc = main(["synth", "--out", str(d), "--count", "4",
               "--image-size", str(SIZE), "--difficulty", "0.3", "--seed", "5"])
    assert rc == 0
    return d


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, dataset):
    d = tmp_path_factory.mktemp("run")
    rc = main(["train", "--data", str(dataset), "--out", str(d),
               "--epochs", "1", "--batch", "2", "--accum", "1",
               "--image-size", str(SIZE), "--seed", "5"])
    assert rc == 0
    return d


# ---------------------------------------------------------------------------
# synth


def test_synth_layout_and_manifest(dataset):
    folders = sorted(p.name for p in dataset.iterdir() if p.is_dir())
    assert folders == [f"scene_{i:04d}" for i in range(4)]
    for name in ("I.ppm", "J.ppm", "depth.pgm", "mask.pgm", "scene.json"):
        assert (dataset / "scene_0000" / name).exists()
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["count"] == 4 and manifest["folders"] == folders
    assert manifest["format_version"] == 1
    cfg = RunConfig.load(dataset / "config.json")
    assert cfg.image_size == SIZE and cfg.seed == 5


def test_synth_is_deterministic(tmp_path, dataset):
    again = tmp_path / "again"
    assert main(["synth", "--out", str(again), "--count", "1",
                 "--image-size", str(SIZE), "--difficulty", "0.3", "--seed", "5"]) == 0
    a = (dataset / "scene_0000" / "I.ppm").read_bytes()
    b = (again / "scene_0000" / "I.ppm").read_bytes()
    assert a == b


def test_synth_rejects_bad_count(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), "--count", "0"]) == 1
    assert "count" in capsys.readouterr().err


def test_thread_cap_env(tmp_path, monkeypatch):
    monkeypatch.setenv("WATERFLOW_THREADS", "2")
    assert main(["synth", "--out", str(tmp_path / "a"), "--count", "1",
                 "--image-size", str(SIZE)]) == 0
    monkeypatch.setenv("WATERFLOW_THREADS", "zero")
    assert main(["synth", "--out", str(tmp_path / "b"), "--count", "1",
                 "--image-size", str(SIZE)]) == 1


def test_usage_error_exits_one():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--count", "2"])  # --out missing
    assert exc.value.code == 1


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "waterflow.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("synth", "train", "sample", "eval", "bench", "priors"):
        assert name in proc.stdout


# ---------------------------------------------------------------------------
# train


def test_train_artifacts(run_dir):
    assert (run_dir / "checkpoint.wfck").exists()
    lines = (run_dir / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2  # 4 scenes / batch 2 = 2 steps per epoch
    rec = json.loads(lines[0])
    assert rec["step"] == 0 and "loss_total" in rec
    cfg = RunConfig.load(run_dir / "config.json")
    assert cfg.run_dir == str(run_dir)


def test_train_resume_matches_straight_run(tmp_path, dataset, run_dir):
    flags = ["--data", str(dataset), "--batch", "2", "--accum", "1",
             "--image-size", str(SIZE), "--seed", "5"]
    straight = tmp_path / "straight"
    assert main(["train", "--out", str(straight), "--epochs", "2", *flags]) == 0
    resumed = tmp_path / "resumed"
    assert main(["train", "--out", str(resumed), "--epochs", "2",
                 "--resume", str(run_dir / "checkpoint.wfck"), *flags]) == 0
    assert (straight / "checkpoint.wfck").read_bytes() == (resumed / "checkpoint.wfck").read_bytes()


def test_train_refuses_foreign_checkpoint(tmp_path, dataset, run_dir, capsys):
    cfg_file = tmp_path / "wide.json"
    RunConfig(image_size=SIZE, head_channels=16, batch=2, accum=1, seed=5).save(cfg_file)
    rc = main(["train", "--data", str(dataset), "--out", str(tmp_path / "w"),
               "--epochs", "2", "--config", str(cfg_file),
               "--resume", str(run_dir / "checkpoint.wfck")])
    assert rc == 3
    assert "fingerprint" in capsys.readouterr().err


def test_train_rejects_size_mismatch(tmp_path, dataset, capsys):
    rc = main(["train", "--data", str(dataset), "--out", str(tmp_path / "m"),
               "--epochs", "1", "--image-size", "64"])
    assert rc == 1
    assert "image_size" in capsys.readouterr().err


def test_train_needs_one_full_batch(tmp_path, dataset):
    rc = main(["train", "--data", str(dataset), "--out", str(tmp_path / "b"),
               "--epochs", "1", "--batch", "8", "--accum", "1",
               "--image-size", str(SIZE)])
    assert rc == 1


def test_train_missing_dataset_exits_two(tmp_path):
    rc = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"),
               "--epochs", "1"])
    assert rc == 2


# ---------------------------------------------------------------------------
# sample


def test_sample_over_dataset(tmp_path, dataset, run_dir):
    out = tmp_path / "preds"
    rc = main(["sample", "--checkpoint", str(run_dir / "checkpoint.wfck"),
               "--image", str(dataset), "--out", str(out),
               "--image-size", str(SIZE), "--seed", "5"])
    assert rc == 0
    for i in range(4):
        stem = f"scene_{i:04d}"
        prob = tensor_io.read_tensor(out / f"{stem}.prob.wft1")
        assert prob.shape == (1, SIZE, SIZE)
        assert prob.min() >= 0.0 and prob.max() <= 1.0
        mask = netpbm.read_mask(out / f"{stem}.mask.pgm")
        assert set(np.unique(mask)) <= {0.0, 1.0}
        assert (out / f"{stem}.prob.pgm").exists()
    assert (out / "config.json").exists()


def test_sample_single_file_and_determinism(tmp_path, dataset, run_dir):
    args = ["sample", "--checkpoint", str(run_dir / "checkpoint.wfck"),
            "--image", str(dataset / "scene_0001" / "I.ppm"),
            "--image-size", str(SIZE), "--seed", "5"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main([*args, "--out", str(a)]) == 0
    assert main([*args, "--out", str(b)]) == 0
    assert (a / "I.prob.wft1").read_bytes() == (b / "I.prob.wft1").read_bytes()


def test_sample_steps_flag_and_diff(tmp_path, dataset, run_dir):
    out = tmp_path / "multi"
    rc = main(["sample", "--checkpoint", str(run_dir / "checkpoint.wfck"),
               "--image", str(dataset / "scene_0000" / "I.ppm"), "--out", str(out),
               "--image-size", str(SIZE), "--steps", "4", "--diff", "1"])
    assert rc == 0
    assert (out / "I.diff.pgm").exists()
    assert RunConfig.load(out / "config.json").steps == 4


def test_sample_size_mismatch_names_both(tmp_path, run_dir, capsys):
    big = tmp_path / "big.ppm"
    netpbm.write_ppm(big, np.zeros((3, 64, 64)))
    rc = main(["sample", "--checkpoint", str(run_dir / "checkpoint.wfck"),
               "--image", str(big), "--out", str(tmp_path / "o"),
               "--image-size", str(SIZE)])
    assert rc == 1
    err = capsys.readouterr().err
    assert "64x64" in err and "32x32" in err


def test_sample_missing_image_exits_two(tmp_path, run_dir):
    rc = main(["sample", "--checkpoint", str(run_dir / "checkpoint.wfck"),
               "--image", str(tmp_path / "ghost.ppm"), "--out", str(tmp_path / "o"),
               "--image-size", str(SIZE)])
    assert rc == 2


# ---------------------------------------------------------------------------
# eval


def test_eval_self_prediction_is_perfect(tmp_path, dataset, capsys):
    pred = tmp_path / "pred"
    pred.mkdir()
    for i in range(4):
        stem = f"scene_{i:04d}"
        mask = netpbm.read_mask(dataset / stem / "mask.pgm")
        netpbm.write_pgm(pred / f"{stem}.prob.pgm", mask)
    report_path = tmp_path / "report.json"
    csv_path = tmp_path / "per_image.csv"
    rc = main(["eval", "--pred", str(pred), "--gt", str(dataset),
               "--report", str(report_path), "--csv", str(csv_path)])
    assert rc == 0
    report = json.loads(report_path.read_text())
    assert report["mae"] == 0.0
    assert report["e_mean"] == 1.0
    assert report["s_measure"] > 1.0 - 1e-9
    assert report["f_convention"] == "swept-mean-256"
    assert report["n_images"] == 4 and len(report["per_image"]) == 4
    header = csv_path.read_text().splitlines()[0]
    assert "mae" in header and "s_measure" in header
    assert len(csv_path.read_text().splitlines()) == 5
    assert "evaluated 4 pairs" in capsys.readouterr().out


def test_eval_unmatched_stems_exit_three(tmp_path, dataset):
    pred = tmp_path / "pred"
    pred.mkdir()
    mask = netpbm.read_mask(dataset / "scene_0000" / "mask.pgm")
    netpbm.write_pgm(pred / "scene_0000.prob.pgm", mask)
    netpbm.write_pgm(pred / "stray.prob.pgm", mask)
    report_path = tmp_path / "report.json"
    rc = main(["eval", "--pred", str(pred), "--gt", str(dataset),
               "--report", str(report_path)])
    assert rc == 3
    report = json.loads(report_path.read_text())
    assert "stray" in report["unmatched_stems"]
    assert report["n_images"] == 1  # shared stems are still scored


def test_eval_disjoint_stems_exit_three(tmp_path, dataset, capsys):
    pred = tmp_path / "pred"
    pred.mkdir()
    netpbm.write_pgm(pred / "other.pgm", np.zeros((SIZE, SIZE)))
    rc = main(["eval", "--pred", str(pred), "--gt", str(dataset),
               "--report", str(tmp_path / "r.json")])
    assert rc == 3
    assert "no filename stems shared" in capsys.readouterr().err


def test_eval_missing_dir_exits_two(tmp_path, dataset):
    rc = main(["eval", "--pred", str(tmp_path / "none"), "--gt", str(dataset),
               "--report", str(tmp_path / "r.json")])
    assert rc == 2


# ---------------------------------------------------------------------------
# bench


def test_bench_reports_latency(tmp_path, run_dir, capsys):
    report_path = tmp_path / "bench.json"
    rc = main(["bench", "--checkpoint", str(run_dir / "checkpoint.wfck"),
               "--steps", "1", "--iters", "10", "--image-size", str(SIZE),
               "--report", str(report_path)])
    assert rc == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    payload = json.loads(line)
    assert payload["steps"] == 1 and payload["iters"] == 10
    assert payload["timed"] == 7  # 3 warmup iterations are discarded
    assert payload["median_ms"] > 0 and payload["p90_ms"] >= payload["median_ms"]
    assert payload["fps"] == pytest.approx(1000.0 / payload["median_ms"])
    on_disk = json.loads(report_path.read_text())
    assert on_disk["median_ms"] == payload["median_ms"]


def test_bench_rejects_tiny_iters(run_dir):
    rc = main(["bench", "--checkpoint", str(run_dir / "checkpoint.wfck"),
               "--iters", "9", "--image-size", str(SIZE)])
    assert rc == 1


# ---------------------------------------------------------------------------
# priors


def test_priors_outputs_eight_families(tmp_path, dataset):
    scene = dataset / "scene_0000"
    out = tmp_path / "pri"
    rc = main(["priors", "--image", str(scene / "I.ppm"),
               "--depth", str(scene / "depth.pgm"), "--out", str(out)])
    assert rc == 0
    names = ["B", "grad_z", "beta_D_hat", "T_D", "R", "Var", "J_hat", "Int"]
    for name in names:
        assert (out / f"{name}.wft1").exists()
        assert (out / f"{name}.pgm").exists()
    info = json.loads((out / "priors.json").read_text())
    for key in ("A_hat", "beta_D_hat", "bin_edges", "inherited_bins",
                "low_confidence_A", "degenerate_regression", "depth_scale"):
        assert key in info
    assert info["depth_scale"] == DEPTH_SCALE
    assert not info["degenerate_regression"]
    T_D = tensor_io.read_tensor(out / "T_D.wft1")
    assert T_D.shape == (3, SIZE, SIZE)
    assert T_D.min() > 0.0 and T_D.max() <= 1.0


def test_priors_zero_depth_falls_back(tmp_path, dataset):
    scene = dataset / "scene_0000"
    flat = tmp_path / "flat.pgm"
    netpbm.write_pgm(flat, np.zeros((SIZE, SIZE)))
    out = tmp_path / "pri0"
    rc = main(["priors", "--image", str(scene / "I.ppm"),
               "--depth", str(flat), "--out", str(out)])
    assert rc == 0
    info = json.loads((out / "priors.json").read_text())
    assert info["degenerate_regression"]
    # zero depth means full transmission: the T_D preview is solid white
    T_D = tensor_io.read_tensor(out / "T_D.wft1")
    assert np.all(T_D == 1.0)
    preview = netpbm.read_pgm(out / "T_D.pgm")
    assert np.all(preview == 1.0)
    J_hat = tensor_io.read_tensor(out / "J_hat.wft1")
    assert np.array_equal(J_hat, netpbm.read_ppm(scene / "I.ppm"))


def test_priors_dim_mismatch_exit_three(tmp_path, dataset):
    scene = dataset / "scene_0000"
    small = tmp_path / "small.pgm"
    netpbm.write_pgm(small, np.zeros((16, 16)))
    rc = main(["priors", "--image", str(scene / "I.ppm"),
               "--depth", str(small), "--out", str(tmp_path / "o")])
    assert rc == 3
