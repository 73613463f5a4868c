import csv
import json

import numpy as np
import pytest

from augopt import formats
from augopt.cli import main
from augopt.encoder import encode
from augopt.similarity import propagate_pseudo_label
from augopt.synthetic import grating_corpus

FAST = ["--B", "4", "--batch-anatomies", "2"]


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("images")
    for i, img in enumerate(grating_corpus(5, 32, seed=2)):
        formats.write_image(d / f"img{i}.augi", img)
    return d


def test_empty_directory(tmp_path, capsys):
    assert main(["superpixels", str(tmp_path), str(tmp_path / "out")]) == 2
    assert "no images found" in capsys.readouterr().err


def test_usage_error(capsys):
    assert main(["optimize"]) == 1
    assert main(["gradcheck", "--operator", "blur"]) == 1


def test_superpixels_outputs_and_rerun(tmp_path, corpus):
    images = tmp_path / "three"
    images.mkdir()
    for name in ["img0.augi", "img1.augi", "img2.augi"]:
        (images / name).write_bytes((corpus / name).read_bytes())
    for run in ("a", "b"):
        assert main(["superpixels", str(images), str(tmp_path / run)]) == 0
    assert sorted(p.name for p in (tmp_path / "a").glob("*.augs")) == ["img0.augs", "img1.augs", "img2.augs"]
    table = rows(tmp_path / "a" / "superpixels.csv")
    for image_id in ("img0", "img1", "img2"):
        labels = formats.read_labels(tmp_path / "a" / f"{image_id}.augs")
        assert sum(r["image_id"] == image_id for r in table) == len(np.unique(labels))
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_sdata_identical_images(tmp_path, corpus):
    images = tmp_path / "same"
    images.mkdir()
    for i in range(3):
        (images / f"copy{i}.augi").write_bytes((corpus / "img0.augi").read_bytes())
    assert main(["superpixels", str(images), str(tmp_path / "labels")]) == 0
    assert main(["sdata", str(images), str(tmp_path / "labels"), str(tmp_path / "sdata")]) == 0
    summary = rows(tmp_path / "sdata" / "sdata_summary.csv")
    assert summary and all(abs(float(r["mean"]) - 1.0) < 1e-12 for r in summary)


def test_sdata_single_image(tmp_path, corpus, capsys):
    images = tmp_path / "one"
    images.mkdir()
    (images / "img0.augi").write_bytes((corpus / "img0.augi").read_bytes())
    main(["superpixels", str(images), str(tmp_path / "labels")])
    assert main(["sdata", str(images), str(tmp_path / "labels"), str(tmp_path / "sdata")]) == 2
    assert "need ≥2 images for intra-class similarity" in capsys.readouterr().err


def test_sdata_missing_labels(tmp_path, corpus, capsys):
    (tmp_path / "labels").mkdir()
    assert main(["sdata", str(corpus), str(tmp_path / "labels"), str(tmp_path / "sdata")]) == 2
    assert "missing label file" in capsys.readouterr().err


def test_sdata_matches_recomputation(tmp_path, corpus):
    main(["superpixels", str(corpus), str(tmp_path / "labels")])
    assert main(["sdata", str(corpus), str(tmp_path / "labels"), str(tmp_path / "sdata")]) == 0
    images = {p.stem: formats.read_image(p) for p in formats.list_images(corpus)}
    fms = {k: encode(v) for k, v in images.items()}
    table = rows(tmp_path / "sdata" / "sdata.csv")
    assert table
    for r in table:
        labels = formats.read_labels(tmp_path / "labels" / f"{r['image_id']}.augs")
        mask = (labels == int(r["superpixel_id"])).astype(float)
        src, dst = fms[r["image_id"]], fms[r["target_image_id"]]
        w_src = mask.reshape(8, 4, 8, 4).mean(axis=(1, 3))
        anchor = (src.data * w_src).sum(axis=(1, 2)) / w_src.sum()
        pred, _ = propagate_pseudo_label(src, mask, dst)
        proto = (dst.data * pred).sum(axis=(1, 2)) / pred.sum()
        expected = anchor @ proto / (np.linalg.norm(anchor) * np.linalg.norm(proto))
        assert abs(float(r["similarity"]) - expected) < 1e-10


def test_optimize_zero_epochs_returns_initialization(tmp_path, corpus):
    out = tmp_path / "run"
    assert main(["optimize", str(corpus), str(out), "--epochs", "0", *FAST]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    params = json.loads((out / "params.json").read_text())
    assert [v for k, v in params.items() if k != "format_version"] == manifest["result"]["a0"]
    assert (out / "labels" / "superpixels.csv").exists() and (out / "sdata" / "sdata_summary.csv").exists()


def test_optimize_manifest_and_rerun(tmp_path, corpus):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["optimize", str(corpus), str(out), "--epochs", "3", "--seed", "5", *FAST]) == 0
    for name in ("params.json", "trajectory.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    manifest = json.loads((outs[0] / "manifest.json").read_text())
    cfg = manifest["config"]
    assert cfg["optimizer.tau"] == 0.03 and cfg["optimizer.learning_rate"] == 0.0005
    assert cfg["optimizer.max_epochs"] == 3 and cfg["segmentation.entropy_threshold"] == 3.0
    assert manifest["seeds"]["optimizer"] == 5 and manifest["result"]["epochs_run"] == 3
    assert set(manifest["inputs"]) == {f"images/img{i}.augi" for i in range(5)}


def test_optimize_reuses_cached_labels_and_sdata(tmp_path, corpus):
    first = tmp_path / "first"
    main(["optimize", str(corpus), str(first), "--epochs", "2", *FAST])
    second = tmp_path / "second"
    assert main(["optimize", str(corpus), str(second), "--epochs", "2", *FAST,
                 "--labels-dir", str(first / "labels"), "--sdata-dir", str(first / "sdata")]) == 0
    assert (first / "trajectory.csv").read_bytes() == (second / "trajectory.csv").read_bytes()
    assert "sdata/sdata_summary.csv" in json.loads((second / "manifest.json").read_text())["inputs"]


def test_optimize_rejects_file_encoder(tmp_path, corpus, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"encoder.kind": "file", "encoder.feature_dir": str(tmp_path)}))
    assert main(["optimize", str(corpus), str(tmp_path / "out"), "--config", str(cfg)]) == 2
    assert "reference encoder" in capsys.readouterr().err


def test_gradcheck_filter_and_failure(capsys):
    assert main(["gradcheck", "--operator", "rotate", "--images", "3"]) == 0
    out = capsys.readouterr().out
    assert "pathwise rotate" in out and "gamma" not in out and "score" not in out
    assert main(["gradcheck", "--operator", "shear", "--images", "3", "--threshold", "1e-20"]) == 3
    assert "shear" in capsys.readouterr().err


def test_report_outputs(tmp_path, corpus, capsys):
    out = tmp_path / "run"
    main(["optimize", str(corpus), str(out), "--epochs", "4", *FAST])
    capsys.readouterr()
    assert main(["report", str(out / "trajectory.csv"), "--out-dir", str(tmp_path / "rep"), "--window", "2"]) == 0
    assert "trailing_mean_loss_2" in capsys.readouterr().out
    for name in ("summary.csv", "loss.png", "similarity.png", "beta.png"):
        assert (tmp_path / "rep" / name).stat().st_size > 0
    assert main(["report", str(tmp_path / "nope.csv")]) == 2


def test_encode_then_file_sdata_matches(tmp_path, corpus):
    main(["superpixels", str(corpus), str(tmp_path / "labels")])
    main(["encode", str(corpus), str(tmp_path / "feats")])
    main(["sdata", str(corpus), str(tmp_path / "labels"), str(tmp_path / "s_ref")])
    assert main(["sdata", str(corpus), str(tmp_path / "labels"), str(tmp_path / "s_file"),
                 "--feature-dir", str(tmp_path / "feats")]) == 0
    ref = rows(tmp_path / "s_ref" / "sdata_summary.csv")
    got = rows(tmp_path / "s_file" / "sdata_summary.csv")
    assert len(ref) == len(got)
    assert all(abs(float(a["mean"]) - float(b["mean"])) < 1e-5 for a, b in zip(ref, got))


def test_synth(tmp_path):
    assert main(["synth", str(tmp_path), "--n", "2", "--size", "16", "--format", "pgm"]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["img000.pgm", "img001.pgm"]


def test_workers_env(tmp_path, corpus, monkeypatch):
    monkeypatch.setenv("AUGOPT_WORKERS", "zero")
    assert main(["superpixels", str(corpus), str(tmp_path)]) == 2
