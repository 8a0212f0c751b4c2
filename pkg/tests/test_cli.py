import csv
import io
import json

import pytest

from layercascade.backbone import read_checkpoint
from layercascade.cli import main

SMALL = ["--set", "backbone.stem=[[6,3,2],[8,3,2]]", "--set", "backbone.stage_channels=[8,8,8]",
         "--set", "backbone.stage_blocks=[1,1,1]", "--set", "backbone.head_channels=8",
         "--class-count", "3", "--lr", "0.1", "--batch-size", "4"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["--seed", "1", "gen-data", "--out", str(root / "train"), "--count", "12", "--size", "32",
                 "--classes", "3"]) == 0
    assert main(["--seed", "2", "gen-data", "--out", str(root / "val"), "--count", "4", "--size", "32",
                 "--classes", "3"]) == 0
    return root


def _train(ws, out, *extra):
    argv = ["--seed", "0", "--deterministic", "train", "--train-data", str(ws / "train"),
            "--val-data", str(ws / "val"), "--out", str(out), "--epochs-initial", "4",
            "--epochs-cascade", "2", "--rho", "0.6"] + SMALL + list(extra)
    return main(argv)


@pytest.fixture(scope="module")
def trained(workspace):
    assert _train(workspace, workspace / "run") == 0
    return workspace / "run"


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_train_outputs(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"config.json", "report.csv", "initial.ckpt", "initial.json", "model.ckpt", "model.json"} <= names
    phase, epoch, _ = read_checkpoint(trained / "model.ckpt")
    assert (phase, epoch) == ("cascade", 6)
    assert read_checkpoint(trained / "initial.ckpt")[:2] == ("initial", 4)
    rows = _rows((trained / "report.csv").read_text())
    assert [r["phase"] for r in rows] == ["initial"] * 4 + ["cascade"] * 2


def test_train_is_byte_reproducible(workspace, trained):
    out = workspace / "again"
    assert _train(workspace, out) == 0
    for name in ("model.ckpt", "initial.ckpt", "report.csv", "model.json"):
        assert (out / name).read_bytes() == (trained / name).read_bytes()


def test_dumped_config_reproduces_run(workspace, trained):
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["backbone"]["class_count"] == 3 and cfg["train"]["rho"] == 0.6
    cfg["out_dir"] = str(workspace / "from_config")
    path = workspace / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["--deterministic", "train", "--config", str(path)]) == 0
    assert (workspace / "from_config" / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()


def test_flags_override_config(workspace, tmp_path):
    cfg = {"train": {"epochs_initial": 5, "epochs_cascade": 0}, "backbone": {"class_count": 3}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    argv = ["--deterministic", "train", "--config", str(path), "--train-data", str(workspace / "train"),
            "--out", str(tmp_path / "o"), "--epochs-initial", "1"] + SMALL
    assert main(argv) == 0
    dumped = json.loads((tmp_path / "o" / "config.json").read_text())
    assert dumped["train"]["epochs_initial"] == 1 and dumped["train"]["epochs_cascade"] == 0


def test_cascade_phase_from_checkpoint(workspace, trained, tmp_path):
    assert _train(workspace, tmp_path, "--phase", "cascade", "--checkpoint", str(trained / "initial.ckpt")) == 0
    assert (tmp_path / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()
    # a cascade phase needs a starting checkpoint
    assert _train(workspace, tmp_path / "x", "--phase", "cascade") == 1
    assert not (tmp_path / "x").exists()


@pytest.mark.parametrize("extra", [["--baseline", "mc", "--mc-epochs-per-stage", "1"],
                                   ["--baseline", "dsn"],
                                   ["--baseline", "dropout", "--drop-rates", "0,0.3,0.5"]])
def test_baselines_run(workspace, tmp_path, extra):
    assert _train(workspace, tmp_path, *extra) == 0
    assert read_checkpoint(tmp_path / "model.ckpt")[0] == "cascade"
    if extra[1] == "dsn":
        assert json.loads((tmp_path / "model.json").read_text())["rho"] == 1.0


def test_dropout_rates_from_checkpoint(workspace, trained, tmp_path):
    assert _train(workspace, tmp_path, "--baseline", "dropout", "--rates-from", str(trained / "model.ckpt")) == 0


def test_sweep_rho_one_is_degenerate(workspace, trained, tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["--deterministic", "sweep-rho", "--checkpoint", str(trained / "model.ckpt"),
                 "--data", str(workspace / "val"), "--rhos", "1.0", "--out", str(out)]) == 0
    (row,) = _rows(out.read_text())
    assert (row["exit_s1_pct"], row["exit_s2_pct"], row["exit_s3_pct"]) == ("0", "0", "100")
    assert row["ms_per_image"] == ""


def test_sweep_rho_grid_monotone(workspace, trained, capsys):
    assert main(["sweep-rho", "--checkpoint", str(trained / "model.ckpt"), "--data", str(workspace / "val"),
                 "--rhos", "0.4,0.6,0.9,1.0"]) == 0
    rows = _rows(capsys.readouterr().out)
    s1 = [float(r["exit_s1_pct"]) for r in rows]
    flops = [int(r["flops_per_image"]) for r in rows]
    assert s1 == sorted(s1, reverse=True) and flops == sorted(flops)
    assert all(float(r["ms_per_image"]) > 0 for r in rows)


def test_infer_twice_byte_identical(workspace, trained, tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["--seed", "0", "--deterministic", "infer", "--checkpoint", str(trained / "model.ckpt"),
                     "--data", str(workspace / "val"), "--rho", "0.6", "--out", str(out)]) == 0
        runs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert runs[0] == runs[1]
    assert "img00003.exit_s3.ppm" in runs[0] and "img00000.labels.pgm" in runs[0]
    ledger = json.loads(runs[0]["img00000.ledger.json"])
    assert [e["name"] for e in ledger["stages"]] == ["stem", "stage1", "stage2", "stage3"]
    assert ledger["total_flops"] == sum(e["flops"] for e in ledger["stages"])
    assert sum(ledger["exit_fractions"]) == pytest.approx(1.0)


def test_infer_single_image(workspace, trained, tmp_path):
    img = workspace / "train" / "sample_00000.ppm"
    assert main(["infer", "--checkpoint", str(trained / "model.ckpt"), "--image", str(img),
                 "--out", str(tmp_path)]) == 0
    ledger = json.loads((tmp_path / "sample_00000.ledger.json").read_text())
    assert "total_time" in ledger


@pytest.mark.filterwarnings("ignore:boundary_fraction of an empty mask")
def test_stats_table(workspace, trained, tmp_path):
    out = tmp_path / "stats.csv"
    assert main(["stats", "--checkpoint", str(trained / "model.ckpt"), "--data", str(workspace / "val"),
                 "--rho", "0.6", "--out", str(out)]) == 0
    rows = _rows(out.read_text())
    scalar = {r["metric"]: r["value"] for r in rows if not r["class"]}
    assert sum(float(scalar[k]) for k in ("es_fraction", "ms_fraction", "hs_fraction")) == pytest.approx(1.0)
    assert scalar["boundary_radius"] == "2"
    exited = [r for r in rows if r["metric"] == "exited"]
    assert sum(int(r["value"]) for r in exited) == int(scalar["pixels"])


def test_bench_fallback_at_full_density(tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--densities", "0.25,1.0", "--repeats", "20", "--out", str(out)]) == 0
    rows = _rows(out.read_text())
    assert float(rows[1]["rc_ms"]) <= 1.3 * float(rows[1]["dense_ms"])
    assert int(rows[0]["flops"]) * 4 == int(rows[0]["dense_flops"])
    assert rows[1]["flops"] == rows[1]["dense_flops"]


def test_grad_check_command(capsys):
    assert main(["grad-check", "--seeds", "2"]) == 0
    rows = _rows(capsys.readouterr().out)
    assert len(rows) == 7 and all(r["pass"] == "PASS" for r in rows)
    # an impossible tolerance is reported as an invariant failure
    assert main(["grad-check", "--seeds", "1", "--ops", "conv", "--tolerance", "0"]) == 2
    assert main(["grad-check", "--ops", "nope"]) == 1


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["train", "--set", "backbone.nope=1", "--train-data", "x"],
    ["train", "--lr", "-1", "--train-data", "x"],
    ["train", "--baseline", "dropout", "--train-data", "x"],
    ["sweep-rho", "--checkpoint", "/does/not/exist", "--data", "x"],
    ["bench", "--densities", "1.5"],
    ["bench", "--densities", "a,b"],
])
def test_invalid_input_exit_code(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    assert list(tmp_path.iterdir()) == []


def test_corrupt_checkpoint_exit_code(trained, workspace, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((trained / "model.ckpt").read_bytes()[:-3])
    (tmp_path / "bad.json").write_bytes((trained / "model.json").read_bytes())
    assert main(["sweep-rho", "--checkpoint", str(bad), "--data", str(workspace / "val")]) == 1


def test_periodic_checkpoints(workspace, tmp_path):
    assert _train(workspace, tmp_path, "--checkpoint-every", "3") == 0
    assert sorted(p.name for p in tmp_path.glob("epoch*.ckpt")) == ["epoch0003.ckpt", "epoch0006.ckpt"]
    _, epoch, tensors = read_checkpoint(tmp_path / "epoch0003.ckpt")
    assert epoch == 3 and any(k.startswith("velocity/") for k in tensors)
