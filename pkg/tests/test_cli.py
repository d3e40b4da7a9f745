import hashlib
import json
import re

import pytest

from gapbridge.cli import grid_combos, main
from gapbridge.datagen import Manifest
from gapbridge.evalharness import read_report_csv


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--classes", "4", "--per-class", "6", "--eval-per-class", "3", "--out", str(root / "data")]) == 0
    return root


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_synth_data_counts(tmp_path, capsys):
    assert main(["synth-data", "--classes", "8", "--per-class", "50", "--splits", "train", "--out", str(tmp_path)]) == 0
    assert len(Manifest.read(tmp_path / "train.jsonl")) == 400
    assert "400 entries" in capsys.readouterr().out


def test_synth_data_rerun_identical(tmp_path):
    for d in ("a", "b"):
        main(["synth-data", "--classes", "3", "--per-class", "2", "--splits", "train", "--out", str(tmp_path / d)])
    assert _sha(tmp_path / "a" / "train.jsonl") == _sha(tmp_path / "b" / "train.jsonl")


def test_one_class_fails(tmp_path, capsys):
    assert main(["synth-data", "--classes", "1", "--out", str(tmp_path)]) != 0
    assert "at least 2 classes" in capsys.readouterr().err


def test_gap_line_format(data, capsys):
    assert main(["gap", "--manifest", str(data / "data" / "train.jsonl"), "--gap", "0", "--text-noise", "0", "--audio-noise", "0"]) == 0
    out = capsys.readouterr().out.strip()
    assert re.fullmatch(r"mean_cosine=[0-9.]+", out)
    assert out == "mean_cosine=1.000000"


def test_gap_calibrate(data, tmp_path, capsys):
    enc = tmp_path / "enc.json"
    args = ["gap", "--manifest", str(data / "data" / "train.jsonl"), "--calibrate", "0.4", "--write-encoder", str(enc)]
    assert main(args) == 0
    value = float(capsys.readouterr().out.strip().split("=")[1])
    assert 0.35 <= value <= 0.45
    assert json.loads(enc.read_text())["gap"] > 0


def test_gap_rate_mismatch(data, tmp_path, capsys):
    enc = tmp_path / "enc16.json"
    enc.write_text(json.dumps({"class_names": ["harmonic", "chirp"], "sample_rate": 16000}))
    assert main(["gap", "--manifest", str(data / "data" / "train.jsonl"), "--encoder", str(enc)]) != 0
    assert "Hz" in capsys.readouterr().err


def test_grid_has_19_combos():
    combos = grid_combos()
    assert len(combos) == 19
    assert ("text", "mixup") not in combos and ("both", "mixup") in combos


def test_eval_missing_checkpoint(data, tmp_path, capsys):
    report = tmp_path / "r.csv"
    code = main([
        "eval", "--checkpoint", str(tmp_path / "nope.ckpt"),
        "--test-manifest", str(data / "data" / "test.jsonl"), "--report", str(report),
    ])
    assert code != 0
    assert not report.exists()
    assert "not found" in capsys.readouterr().err


def test_train_invalid_config_lists_problems(data, tmp_path, capsys):
    code = main([
        "train", "--manifest", str(data / "data" / "train.jsonl"), "--out", str(tmp_path / "r"),
        "--query-mode", "text", "--method", "mixup", "--steps", "0",
    ])
    assert code != 0
    err = capsys.readouterr().err
    assert "mixup" in err and "steps" in err
    assert not (tmp_path / "r").exists()


def test_grid_train_then_eval(data, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("GAPBRIDGE_OUT", str(tmp_path))
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"train": {"batch_size": 2, "checkpoint_interval": 100}, "extractor": {"num_layers": 1}}))
    code = main([
        "train", "--config", str(config), "--manifest", str(data / "data" / "train.jsonl"), "--out", "grid",
        "--grid", "--grid-modes", "text,audio", "--grid-methods", "none,dropout", "--steps", "3", "--seed", "1",
    ])
    assert code == 0
    index = json.loads((tmp_path / "grid" / "grid.json").read_text())
    assert sorted(index) == ["audio-dropout", "audio-none", "text-dropout", "text-none"]
    for name in ("a.csv", "b.csv"):
        assert main([
            "eval", "--grid-index", str(tmp_path / "grid" / "grid.json"),
            "--test-manifest", str(data / "data" / "test.jsonl"), "--n-mixtures", "6", "--report", name,
        ]) == 0
    report = read_report_csv(tmp_path / "a.csv")
    assert len(report.cells) == 4
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    capsys.readouterr()


def test_manipulate(tmp_path, capsys):
    from gapbridge.embeddings import ToyJointEncoder, ToyJointEncoderConfig, read_embedding_cache, write_embedding_cache

    enc = ToyJointEncoder(ToyJointEncoderConfig())
    recs = [(f"c{i}", enc.encode_text(f"this is the sound of {n}", seed=i)) for i, n in enumerate(enc.class_names * 3)]
    write_embedding_cache(tmp_path / "in.jsonl", recs)
    assert main(["manipulate", "--input", str(tmp_path / "in.jsonl"), "--out", str(tmp_path / "d.jsonl"), "--method", "dropout", "--p", "1.0"]) == 0
    assert all(not q.vector.any() for _, q in read_embedding_cache(tmp_path / "d.jsonl"))
    assert main(["manipulate", "--input", str(tmp_path / "in.jsonl"), "--out", str(tmp_path / "p.jsonl"), "--method", "pca", "--pca-dim", "4"]) == 0
    assert read_embedding_cache(tmp_path / "p.jsonl")[0][1].dim == 4
