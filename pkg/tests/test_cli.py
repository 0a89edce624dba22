import json
import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

from oracles import color_card
from toposeg import boxcount as bc
from toposeg import formats
from toposeg.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main

FIXTURES = Path(__file__).parent / "fixtures"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


@pytest.fixture
def carpet(tmp_path):
    path = tmp_path / "carpet.pgm"
    formats.write_gray(path, bc.sierpinski_carpet(3) * 255, 8)
    return path


@pytest.fixture
def card(tmp_path):
    path = tmp_path / "card.png"
    formats.write_rgb(path, color_card())
    return path


def test_augment_is_seeded(tmp_path, capsys, card):
    c1, o1 = run(capsys, "augment", "--in", card, "--out", tmp_path / "a.png", "--seed", 42)
    c2, o2 = run(capsys, "augment", "--in", card, "--out", tmp_path / "b.png", "--seed", 42)
    assert c1 == c2 == EXIT_OK and o1 == o2
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert set(json.loads(o1)) == {"applied", "operator", "se_size", "seed"}


def test_augment_golden_and_identity(tmp_path, capsys):
    cfg = tmp_path / "aug.cfg"
    cfg.write_text("op_weights = 0,0,0,0,1,0\np_apply = 1\n")
    code, out = run(capsys, "augment", "--in", FIXTURES / "test_card.png", "--out", tmp_path / "g.png", "--config", cfg, "--seed", 42)
    assert code == EXIT_OK and json.loads(out)["operator"] == "white_tophat"
    golden = formats.read_rgb(FIXTURES / "test_card_white_tophat_seed42.png")
    assert np.array_equal(formats.read_rgb(tmp_path / "g.png"), golden)

    cfg.write_text("p_apply = 0\n")
    code, out = run(capsys, "augment", "--in", FIXTURES / "test_card.png", "--out", tmp_path / "i.png", "--config", cfg)
    assert code == EXIT_OK and json.loads(out)["applied"] is False
    assert np.array_equal(formats.read_rgb(tmp_path / "i.png"), formats.read_rgb(FIXTURES / "test_card.png"))


def test_augment_errors(tmp_path, capsys, card):
    assert run(capsys, "augment", "--in", tmp_path / "nope.png", "--out", tmp_path / "o.png")[0] == EXIT_IO
    bad = tmp_path / "bad.cfg"
    bad.write_text("p_apply = 7\n")
    assert run(capsys, "augment", "--in", card, "--out", tmp_path / "o.png", "--config", bad)[0] == EXIT_CONFIG


def test_boxcount_carpet(tmp_path, capsys, carpet):
    for mode in ("hard", "soft"):
        code, _ = run(capsys, "boxcount", "--in", carpet, "--scales", "1,3,9,27", "--mode", mode, "--out", tmp_path / f"{mode}.csv")
        assert code == EXIT_OK
    hard = (tmp_path / "hard.csv").read_text()
    assert hard == (tmp_path / "soft.csv").read_text()
    assert hard.splitlines() == ["batch,channel,scale,count", "0,0,1,512", "0,0,3,64", "0,0,9,8", "0,0,27,1"]


def test_boxcount_zero_image_and_extent(tmp_path, capsys):
    path = tmp_path / "z.pgm"
    formats.write_gray(path, np.zeros((8, 8), dtype=np.int64), 8)
    code, out = run(capsys, "boxcount", "--in", path, "--scales", "1,2,4")
    assert code == EXIT_OK and [line.split(",")[-1] for line in out.splitlines()[1:]] == ["0", "0", "0"]
    assert run(capsys, "boxcount", "--in", path, "--scales", "1,16")[0] == EXIT_CONFIG
    assert run(capsys, "boxcount", "--in", path, "--scales", "2,1")[0] == EXIT_CONFIG
    assert run(capsys, "boxcount", "--in", tmp_path / "missing.pgm")[0] == EXIT_IO


def test_fracdim(tmp_path, capsys, carpet):
    code, out = run(capsys, "fracdim", "--in", carpet, "--scales", "1,3,9,27")
    report = json.loads(out)
    assert code == EXIT_OK and report["slope"] == pytest.approx(np.log(8) / np.log(3), abs=0.05)
    square = tmp_path / "sq.pgm"
    formats.write_gray(square, np.full((16, 16), 65535), 16)
    code, out = run(capsys, "fracdim", "--in", square, "--scales", "1,2,4,8")
    assert code == EXIT_OK and json.loads(out)["slope"] == pytest.approx(2.0, abs=1e-9)


def test_fracdim_zero_count(tmp_path, capsys):
    path = tmp_path / "z.pgm"
    formats.write_gray(path, np.zeros((8, 8), dtype=np.int64), 8)
    code = main(["fracdim", "--in", str(path), "--scales", "1,2"])
    assert code == EXIT_NUMERIC
    assert "undefined dimension" in capsys.readouterr().err


def test_corpus_train_eval_infer(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    code, out = run(capsys, "gen-corpus", "--n", 4, "--seed", 3, "--out", corpus)
    assert code == EXIT_OK and json.loads(out)["scenes"] == 4
    assert len(list(corpus.glob("scene_*_labels.pgm"))) == 4

    code, out = run(capsys, "eval", "--corpus", corpus, "--pred", corpus)
    report = json.loads(out)
    assert code == EXIT_OK and report["acc"] == 1.0 and report["miou"] == 1.0

    out_dir = tmp_path / "run"
    code, _ = run(capsys, "train-toy", "--corpus", corpus, "--out", out_dir, "--epochs", 1, "--batch-size", 2, "--loss-terms", "con,dist", "--no-topoaug")
    assert code == EXIT_OK
    assert (out_dir / "metrics.csv").read_text().startswith("epoch,acc,miou,l_con,l_dist,l_align,l_ref,total\n1,")
    assert "loss_terms = con,dist" in (out_dir / "config.txt").read_text()
    steps = (out_dir / "steps.csv").read_text().splitlines()
    assert steps[0] == "step,l_con,l_dist,l_align,l_ref,total" and len(steps) == 3

    code, out = run(capsys, "eval", "--corpus", corpus, "--checkpoint", out_dir / "checkpoint.bin")
    assert code == EXIT_OK and 0 <= json.loads(out)["miou"] <= 1

    label_path = tmp_path / "labels.pgm"
    code, out = run(capsys, "infer", "--checkpoint", out_dir / "checkpoint.bin", "--in", corpus / "scene_0000.png", "--out", label_path)
    assert code == EXIT_OK and formats.read_gray(label_path).max() < 4


def test_train_toy_zero_epochs(tmp_path, capsys):
    code, _ = run(capsys, "train-toy", "--n", 2, "--out", tmp_path, "--epochs", 0)
    assert code == EXIT_OK
    assert (tmp_path / "metrics.csv").read_text() == "epoch,acc,miou,l_con,l_dist,l_align,l_ref,total\n"
    assert formats.load_checkpoint(tmp_path / "checkpoint.bin")


def test_config_and_io_errors(tmp_path, capsys):
    assert run(capsys, "train-toy", "--n", 2, "--out", tmp_path, "--loss-terms", "con,bogus")[0] == EXIT_CONFIG
    bad = tmp_path / "t.cfg"
    bad.write_text("learning_rate = 1\n")
    assert run(capsys, "train-toy", "--n", 2, "--out", tmp_path, "--config", bad)[0] == EXIT_CONFIG
    assert run(capsys, "eval", "--corpus", tmp_path / "none", "--pred", tmp_path)[0] == EXIT_IO
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"not a checkpoint")
    assert run(capsys, "infer", "--checkpoint", junk, "--in", FIXTURES / "infer_scene.png", "--out", tmp_path / "x.pgm")[0] == EXIT_IO
    assert run(capsys, "no-such-command")[0] == EXIT_CONFIG
    assert run(capsys, "boxcount")[0] == EXIT_CONFIG


@pytest.mark.skipif(shutil.which("toposeg") is None, reason="console script not installed")
def test_console_script_exit_code(tmp_path):
    proc = subprocess.run(["toposeg", "boxcount", "--in", str(tmp_path / "missing.pgm")], capture_output=True, text=True)
    assert proc.returncode == EXIT_IO and "error" in proc.stderr
