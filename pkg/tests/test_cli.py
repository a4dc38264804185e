import configparser
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from voxeldose import pipeline
from voxeldose.cli import main
from voxeldose.dosimetry import LABELS
from voxeldose.fileio import load_dose, read_dose_csv

from .conftest import TINY_TRAIN, tiny_config


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.ini").write_text("[cohort]\ncount = 3\nspacing_mm = 8\nseed = 4\n")
    assert main(["phantom", "gen", "--spec", str(d / "spec.ini"), "--out", str(d / "ph"), "--index", "1"]) == 0
    return d


def test_phantom_gen_layout(phantom_dir):
    p = phantom_dir / "ph" / "P001"
    assert (p / "phantom.vox").exists()
    assert {f.name for f in (p / "masks").iterdir()} >= {f"{k}.mask" for k in LABELS}


def test_simulate_organ_dose_scout(phantom_dir):
    d = phantom_dir
    ph = d / "ph" / "P001" / "phantom.vox"
    geo = configparser.ConfigParser()
    geo["geometry"] = {"scan_start_mm": "100", "scan_end_mm": "300"}
    with open(d / "geo.cfg", "w") as fh:
        geo.write(fh)
    maps = []
    for k, angle in enumerate((0, 90, 180, 270)):
        out = d / f"dose{angle}.vox"
        assert main(["simulate", "--phantom", str(ph), "--geometry", str(d / "geo.cfg"),
                     "--histories", "5000", "--seed", str(k), "--start-angle", str(angle),
                     "--out", str(out)]) == 0
        maps.append(str(out))
    assert load_dose(maps[0]).histories == 5000
    assert main(["organ-dose", "--dose", *maps, "--masks", str(d / "ph" / "P001" / "masks"),
                 "--phantom", str(ph), "--out", str(d / "od.csv")]) == 0
    (pid, doses), = read_dose_csv(d / "od.csv")
    assert pid == "P001" and all(v >= 0 for v in doses.values())
    assert main(["scout", "render", "--phantom", str(ph), "--out", str(d / "sc")]) == 0
    assert (d / "sc" / "frontal.scout").exists() and (d / "sc" / "lateral.scout").exists()


def test_train_and_predict(tiny_experiment, tmp_path):
    cfg, _ = tiny_experiment
    replace(cfg, out_dir=tmp_path / "unused").to_ini(tmp_path / "e.cfg")
    ckpt = tmp_path / "model.npz"
    assert main(["train", "--data", str(cfg.out_dir), "--config", str(tmp_path / "e.cfg"), "--out", str(ckpt)]) == 0
    assert (tmp_path / "model_log.csv").read_text().startswith("epoch,train_loss,val_loss")
    scouts = Path(cfg.out_dir) / "records" / "P000"
    assert main(["predict", "--ckpt", str(ckpt), "--scouts", str(scouts), "--range", "20:500",
                 "--out", str(tmp_path / "pred.csv")]) == 0
    (pid, doses), = read_dose_csv(tmp_path / "pred.csv")
    assert pid == "P000" and set(doses) == set(LABELS)


def test_run_exit_codes(tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path / "out", count=2, histories=2_000, ablations=False)
    cfg.to_ini(tmp_path / "e.cfg")
    assert main(["run", "--config", str(tmp_path / "e.cfg")]) == 0
    assert (tmp_path / "out" / "report" / "report.json").exists()
    assert main(["run", "--config", str(tmp_path / "e.cfg"), "--resume", "--threads", "2"]) == 0

    cfg3 = tiny_config(tmp_path / "out3", count=3, histories=2_000, ablations=False)
    cfg3.to_ini(tmp_path / "e3.cfg")
    real = pipeline.simulate_scan
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 1:
            raise RuntimeError("boom")
        return real(*a, **k)

    monkeypatch.setattr(pipeline, "simulate_scan", flaky)
    assert main(["run", "--config", str(tmp_path / "e3.cfg")]) == 1


def test_errors_exit_2(tmp_path):
    assert main(["predict", "--ckpt", str(tmp_path / "missing.npz"), "--scouts", str(tmp_path),
                 "--range", "0:10", "--out", str(tmp_path / "x.csv")]) == 2
    with pytest.raises(SystemExit):
        main(["predict", "--ckpt", "x", "--scouts", "y", "--range", "bad", "--out", "z"])


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "voxeldose.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("phantom", "simulate", "organ-dose", "scout", "train", "predict", "run"):
        assert cmd in out.stdout
