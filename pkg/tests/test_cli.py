import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from resfields.cli import main
from resfields.io import load_checkpoint

TINY = ["--frames", "4", "--img-height", "8", "--img-width", "8", "--width", "8", "--depth",
        "5", "--rank", "2", "--iterations", "4", "--batch-size", "16", "--frames-per-batch", "4"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_params_table(capsys):
    code, out, _ = run(capsys, "params", "--arch", "siren", "--width", "512", "--depth", "5",
                       "--resfields", "1,2,3", "--rank", "10", "--factors", "300")
    assert code == 0
    row = next(l for l in out.splitlines() if l.startswith("lowrank"))
    _, formula, allocated, millions = row.split()
    assert formula == allocated == "8664875" and millions == "8.66M"


def test_params_all_tags(capsys):
    code, out, _ = run(capsys, "params", "--factorization", "all")
    assert code == 0
    names = [l.split()[0] for l in out.splitlines()[1:]]
    assert {"none", "lowrank", "dictionary", "tucker", "cp", "matrix", "loe"} <= set(names)


def test_usage_errors_exit_2(capsys, tmp_path):
    assert run(capsys, "train", "--config", str(tmp_path / "missing.json"))[0] == 2
    code, _, err = run(capsys, "train", "--bogus")
    assert code == 2 and "usage" in err.lower()
    assert run(capsys, "eval", "--checkpoint", str(tmp_path / "nope.rfck"))[0] == 2
    assert run(capsys, "frobnicate")[0] == 2


def test_module_entry_point(tmp_path):
    p = subprocess.run([sys.executable, "-m", "resfields.cli", "train", "--config",
                        str(tmp_path / "missing.json")], capture_output=True, text=True)
    assert p.returncode == 2 and "missing.json" in p.stderr


def test_grad_check_subset(capsys, monkeypatch):
    code, out, _ = run(capsys, "grad-check", "--all", "--seeds", "1")
    lines = out.splitlines()
    assert code == 0 and all(l.startswith("PASS") for l in lines)
    assert any("flow-se3" in l for l in lines) and any("dictionary-direct" in l for l in lines)


def test_train_eval_export(capsys, tmp_path):
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", "--task", "video", "--out", str(out_dir), *TINY)
    assert code == 0
    summary = json.loads(out)
    assert {"train_psnr", "test_psnr", "params", "wall_seconds"} <= set(summary)
    for name in ("config.json", "metrics.csv", "model.rfck", "summary.json"):
        assert (out_dir / name).exists()
    header = (out_dir / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("step,lr,train_loss")
    code, out, _ = run(capsys, "eval", "--checkpoint", str(out_dir / "model.rfck"))
    ev = json.loads(out)
    assert code == 0 and ev["test_psnr"] == pytest.approx(summary["test_psnr"], rel=1e-12)
    code, _, _ = run(capsys, "export", "--checkpoint", str(out_dir / "model.rfck"), "--out",
                     str(tmp_path / "frames"))
    assert code == 0 and len(list((tmp_path / "frames").glob("frame_*.ppm"))) == 4


def test_config_file_and_seed_override(capsys, tmp_path, monkeypatch):
    cfg = {"task": "video", "seed": 3, "model": {"width": 8, "depth": 5, "rank": 2},
           "data": {"frames": 4, "height": 8, "width": 8},
           "optim": {"iterations": 2, "batch_size": 16, "frames_per_batch": 4}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    monkeypatch.setenv("RESFIELDS_SEED", "11")
    assert run(capsys, "train", "--config", str(path), "--out", str(tmp_path / "r"))[0] == 0
    saved = json.loads((tmp_path / "r" / "config.json").read_text())
    assert saved["seed"] == 11 and saved["model"]["width"] == 8
    ck = load_checkpoint(tmp_path / "r" / "model.rfck")
    assert ck.config["run"]["seed"] == 11


def test_thread_cap_gives_identical_results(capsys, tmp_path, monkeypatch):
    results = []
    for n in ("1", "3"):
        monkeypatch.setenv("RESFIELDS_THREADS", n)
        code, out, _ = run(capsys, "train", "--out", str(tmp_path / n), *TINY)
        assert code == 0
        results.append(load_checkpoint(tmp_path / n / "model.rfck").tensors)
    a, b = results
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_gen_data_each_task(capsys, tmp_path):
    assert run(capsys, "gen-data", "--task", "video", "--frames", "3", "--img-height", "4",
               "--img-width", "5", "--out", str(tmp_path / "v"))[0] == 0
    assert len(list((tmp_path / "v").glob("frame_*.ppm"))) == 3
    assert run(capsys, "gen-data", "--task", "sdf", "--frames", "2", "--n-per-frame", "16",
               "--grid", "16", "--out", str(tmp_path / "s"))[0] == 0
    assert np.load(tmp_path / "s" / "sdf_samples.npz")["X"].shape == (32, 4)
    assert len(list((tmp_path / "s").glob("mesh_*.obj"))) == 2
    assert run(capsys, "gen-data", "--task", "flow", "--frames", "4", "--points", "20",
               "--out", str(tmp_path / "f"))[0] == 0
    assert np.load(tmp_path / "f" / "flow.npz")["positions"].shape == (4, 20, 3)


def test_frame_directory_training(capsys, tmp_path):
    run(capsys, "gen-data", "--task", "video", "--frames", "4", "--img-height", "8",
        "--img-width", "8", "--out", str(tmp_path / "v"))
    code, out, _ = run(capsys, "train", "--frame-dir", str(tmp_path / "v"), "--out",
                       str(tmp_path / "r"), *TINY)
    assert code == 0 and json.loads(out)["train_psnr"] > 0


def test_sdf_and_flow_training(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--task", "sdf", "--frames", "3", "--n-per-frame", "40",
                       "--grid", "12", "--width", "8", "--iterations", "3", "--batch-size", "30",
                       "--out", str(tmp_path / "s"))
    assert code == 0 and "chamfer" in json.loads(out)
    code, out, _ = run(capsys, "train", "--task", "flow", "--frames", "4", "--points", "20",
                       "--width", "8", "--depth", "4", "--head", "dct", "--iterations", "3",
                       "--out", str(tmp_path / "f"))
    res = json.loads(out)
    assert code == 0 and {"test_fwd", "test_bwd"} <= set(res)
    assert load_checkpoint(tmp_path / "f" / "model.rfck").config["meta"]["arch"] == "relu_pe"
    code, out, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "f" / "model.rfck"))
    assert json.loads(out)["test_fwd"] == pytest.approx(res["test_fwd"], rel=1e-12)
    assert run(capsys, "export", "--checkpoint", str(tmp_path / "f" / "model.rfck"))[0] == 2


def test_ablate_writes_csv(capsys, tmp_path):
    path = tmp_path / "grid.csv"
    code, _, _ = run(capsys, "ablate", "--ablation", "factorization", "--csv", str(path),
                     "--out", str(tmp_path), *TINY)
    assert code == 0
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == ["variant", "rank", "params", "train_metric", "test_metric",
                             "wall_seconds"]
    assert rows[0]["variant"] == "none"
    assert {r["variant"] for r in rows} >= {"cp", "tucker", "lowrank", "dictionary", "loe"}
