import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from djpeg.cli import main
from djpeg.corpus import load_corpus, write_pgm
from djpeg.dataset import Dataset
from djpeg.detectors import Detector


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-corpus", "--out", str(root / "corpus"), "--count", "12", "--size", "256", "--seed", "4"]) == 0
    assert main(["dataset-gen", "--corpus", str(root / "corpus"), "--qf2", "95", "--qf1", "60", "90",
                 "--alignment", "mixed", "--train", "80", "--val", "40", "--out", str(root / "data"),
                 "--seed", "2"]) == 0
    for kind in ("hist", "noise"):
        assert main(["train", "--detector", kind, "--dataset", str(root / "data"), "--epochs", "1",
                     "--out", str(root / kind / "model.djf")]) == 0
    return root


def test_make_corpus_and_dataset_outputs(pipeline):
    assert len(load_corpus(pipeline / "corpus")) == 12
    ds = Dataset.load(pipeline / "data")
    assert len(ds) == 120 and set(ds.qf1[ds.labels == 1].tolist()) == {60, 90}
    run = json.loads((pipeline / "data" / "run.json").read_text())
    assert run["command"] == "dataset-gen" and run["args"]["seed"] == 2


def test_train_writes_checkpoint_and_report(pipeline):
    det = Detector.load(pipeline / "hist" / "model.djf")
    assert det.kind == "hist" and det.B == 64
    rows = (pipeline / "hist" / "model.report.csv").read_text().splitlines()
    assert rows[0].startswith("epoch,train_loss,val_loss") and len(rows) == 2
    run = json.loads((pipeline / "hist" / "run.json").read_text())
    assert run["sgd"]["lr0"] == 0.01 and run["sgd"]["max_epochs"] == 1


def test_train_is_reproducible_from_run_config(pipeline, tmp_path):
    out = tmp_path / "again" / "model.djf"
    assert main(["train", "--config", str(pipeline / "noise" / "run.json"), "--out", str(out)]) == 0
    assert digest(out) == digest(pipeline / "noise" / "model.djf")


def test_eval_one_row_per_pair(pipeline, tmp_path):
    assert main(["eval", "--checkpoint", str(pipeline / "hist" / "model.djf"), "--dataset", str(pipeline / "data"),
                 "--out", str(tmp_path / "ev")]) == 0
    with open(tmp_path / "ev" / "grid.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["qf1"], r["qf2"]) for r in rows] == [("60", "95"), ("90", "95")]
    assert all(0 <= float(r["accuracy"]) <= 1 for r in rows)


def test_cross_eval(pipeline, tmp_path):
    assert main(["cross-eval", "--checkpoint", str(pipeline / "noise" / "model.djf"),
                 "--dataset", str(pipeline / "data"), "--split", "all", "--out", str(tmp_path / "x")]) == 0
    assert (tmp_path / "x" / "summary.txt").read_text().startswith("overall accuracy")


def test_localize_13x13(pipeline, tmp_path):
    image = load_corpus(pipeline / "corpus")[0][1]
    write_pgm(tmp_path / "probe.pgm", image)
    assert main(["localize", "--checkpoint", str(pipeline / "hist" / "model.djf"), "--image",
                 str(tmp_path / "probe.pgm"), "--out", str(tmp_path / "heat" / "probe")]) == 0
    probs = np.loadtxt(tmp_path / "heat" / "probe.csv", delimiter=",")
    assert probs.shape == (13, 13) and np.all((probs >= 0) & (probs <= 1))
    assert (tmp_path / "heat" / "probe.png").stat().st_size > 0


def test_fuse(pipeline, tmp_path):
    args = ["fuse", "--hist", str(pipeline / "hist" / "model.djf"), "--noise", str(pipeline / "noise" / "model.djf"),
            "--dataset", str(pipeline / "data"), "--split", "all", "--trees", "5", "--out", str(tmp_path / "f")]
    assert main(args) == 0
    result = json.loads((tmp_path / "f" / "fusion.json").read_text())
    assert result["fit_count"] + result["test_count"] == 120
    assert (tmp_path / "f" / "fusion.pkl").exists()
    swapped = list(args)
    swapped[2], swapped[4] = swapped[4], swapped[2]
    assert main(swapped) == 2


def test_inspect_features(pipeline, tmp_path):
    assert main(["inspect-features", "--dataset", str(pipeline / "data"), "--index", "3", "--png",
                 "--out", str(tmp_path / "feat.csv")]) == 0
    feats = np.loadtxt(tmp_path / "feat.csv", delimiter=",")
    assert feats.shape == (100, 63) and (tmp_path / "feat.png").exists()


def test_missing_required_flag_is_usage_error(capsys):
    assert main(["dataset-gen", "--out", "/tmp/nowhere"]) == 2
    assert "usage:" in capsys.readouterr().err


def test_invalid_choice_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["dataset-gen", "--qf2", "80"])
    assert info.value.code == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.djf"), "--dataset", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 1
    assert "djpeg eval" in capsys.readouterr().err


def test_seed_from_environment(tmp_path, monkeypatch):
    assert main(["make-corpus", "--out", str(tmp_path / "a"), "--count", "2", "--size", "64", "--seed", "7"]) == 0
    monkeypatch.setenv("DJF_SEED", "7")
    assert main(["make-corpus", "--out", str(tmp_path / "b"), "--count", "2", "--size", "64"]) == 0
    monkeypatch.setenv("DJF_SEED", "8")
    assert main(["make-corpus", "--out", str(tmp_path / "c"), "--count", "2", "--size", "64"]) == 0
    a, b, c = (load_corpus(tmp_path / k) for k in "abc")
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    assert not np.array_equal(a[0][1], c[0][1])


def test_dataset_gen_rerun_is_identical(pipeline, tmp_path):
    assert main(["dataset-gen", "--config", str(pipeline / "data" / "run.json"), "--out", str(tmp_path / "d")]) == 0
    assert digest(tmp_path / "d" / "patches.bin") == digest(pipeline / "data" / "patches.bin")


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "djpeg.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for command in ("make-corpus", "dataset-gen", "train", "eval", "cross-eval", "localize", "fuse",
                    "inspect-features"):
        assert command in out.stdout
