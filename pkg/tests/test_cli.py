import json

import pytest

from confgrasp.cli import MANIFEST, main

SMALL = {
    "backbone": {"input_size": 32, "stage_channels": [4, 6, 8, 8], "crop_cells": 1, "decoder_channels": 4,
                 "head_hidden": 8},
    "train": {"batch_size": 4},
    "adapt": {"loc_epochs": 2},
}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = root / "conf.json"
    conf.write_text(json.dumps(SMALL))
    c = str(conf)

    def ok(*argv):
        assert main(list(argv)) == 0, argv

    ok("synth", "--seed", "0", "--labelled", "6", "--unlabelled", "3", "--eval", "3", "--size", "32",
       "--out", str(root / "src"))
    ok("synth", "--seed", "0", "--labelled", "6", "--unlabelled", "3", "--eval", "3", "--size", "32",
       "--shift", "target", "--out", str(root / "tgt"))
    ok("train", "--data", str(root / "src"), "--stage", "pose", "--epochs-pose", "2", "--config", c,
       "--out", str(root / "pose"))
    ok("train", "--data", str(root / "src"), "--stage", "loc", "--init-from", str(root / "pose" / "model.ckpt"),
       "--epochs-loc", "2", "--config", c, "--out", str(root / "full"))
    for tag in ("a1", "a2"):
        ok("adapt", "--data", str(root / "tgt"), "--source-ckpt", str(root / "full" / "model.ckpt"), "--method",
           "cmt", "--labelled-n", "3", "--epochs", "2", "--steps-per-epoch", "2", "--loc-finetune-n", "4",
           "--config", c, "--out", str(root / tag))
    return root, c


def test_rerun_csvs_byte_identical(runs):
    root, _ = runs
    a, b = root / "a1" / "adapt_confidence_mt_n3.csv", root / "a2" / "adapt_confidence_mt_n3.csv"
    assert a.read_bytes() == b.read_bytes()
    assert (root / "a1" / "model.ckpt").read_bytes() == (root / "a2" / "model.ckpt").read_bytes()


def test_manifest_contents(runs):
    root, _ = runs
    m = json.loads((root / "full" / MANIFEST).read_text())
    assert m["command"] == "train --stage loc" and m["seed"] == 0
    assert len(m["datasets"]) == 2 and all(len(h) == 64 for h in m["datasets"].values())
    assert "model.ckpt" in m["artifacts"]
    assert m["config"]["backbone"]["input_size"] == 32


def test_eval_and_detect(runs, tmp_path, capsys):
    root, c = runs
    ckpt = str(root / "full" / "model.ckpt")
    assert main(["eval", "--ckpt", ckpt, "--data", str(root / "src"), "--out", str(tmp_path / "ev")]) == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert rep["n_samples"] == 3 and 0 <= rep["success_rate"] <= 1
    img = next((root / "src").glob("*eval-00000r.png"))
    depth = next((root / "src").glob("*eval-00000d.tiff"))
    capsys.readouterr()
    argv = ["detect", "--ckpt", ckpt, "--image", str(img), "--depth", str(depth), "--top-n", "3",
            "--dump-heatmap", "--dump-vertices", "--out", str(tmp_path / "det")]
    assert main(argv) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "x,y,theta,w,h,score,m_uc" and 1 <= len(out) <= 4
    pgm = (tmp_path / "det" / "heatmap.pgm").read_bytes()
    assert pgm.startswith(b"P5\n16 16\n255\n") and len(pgm) == len(b"P5\n16 16\n255\n") + 256
    assert (tmp_path / "det" / "vertices.csv").read_text().startswith("rank,x0,y0")


def test_exit_codes(runs, tmp_path):
    root, c = runs
    with pytest.raises(SystemExit) as e:
        main(["adapt", "--method", "bogus"])
    assert e.value.code == 2
    assert main(["train", "--data", str(root / "src"), "--stage", "loc", "--out", str(tmp_path / "x")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"nope": 1}}))
    assert main(["train", "--data", str(root / "src"), "--stage", "pose", "--config", str(bad),
                 "--out", str(tmp_path / "y")]) == 2
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", str(root / "src"),
                 "--out", str(tmp_path / "z")]) == 1
    assert main(["synth", "--out", str(root / "src")]) == 1  # non-empty without --force


def test_data_root_env(runs, tmp_path, monkeypatch):
    root, _ = runs
    monkeypatch.setenv("CONFGRASP_DATA", str(root))
    monkeypatch.chdir(tmp_path)
    ckpt = str(root / "full" / "model.ckpt")
    assert main(["eval", "--ckpt", ckpt, "--data", "src", "--out", str(tmp_path / "ev")]) == 0
