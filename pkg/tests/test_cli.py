import numpy as np
import pytest
from PIL import Image

from dair.checkpoint import checkpoint_load
from dair.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, run

TINY_CONFIG = """variant = dair
depth = 2
channels = 4
f = 3
s = 2
iterations = 3
batch-size = 1
log-interval = 1
checkpoint-interval = 2
seed = 4
"""


@pytest.fixture()
def corpus(tmp_path):
    rng = np.random.default_rng(0)
    lines = []
    for i in range(2):
        Image.fromarray(rng.integers(0, 256, (100, 110, 3)).astype(np.uint8)).save(tmp_path / f"im{i}.png")
        lines.append(f"im{i}.png")
    (tmp_path / "set.txt").write_text("\n".join(lines) + "\n")
    (tmp_path / "tiny.cfg").write_text(TINY_CONFIG)
    return tmp_path


@pytest.fixture()
def trained(corpus, capsys):
    code = run(["train", "--config", str(corpus / "tiny.cfg"), "--manifest", str(corpus / "set.txt"),
                "--out", str(corpus / "run")])
    assert code == EXIT_OK
    capsys.readouterr()
    return corpus / "run" / "final.ckpt"


@pytest.mark.parametrize("op", ["adaptive-resample", "conv2d", "pixel-shuffle", "asp", "model"])
def test_gradcheck_exits_zero(op, capsys):
    assert run(["gradcheck", "--op", op, "--f", "3", "--s", "2", "--seed", "7"]) == EXIT_OK
    out = capsys.readouterr().out.strip()
    name, err, verdict = out.split("\t")
    assert name == op and verdict == "ok"
    assert float(err.split("=")[1]) < 1e-5


def test_resize_halves(tmp_path):
    Image.fromarray(np.zeros((21, 30), np.uint8)).save(tmp_path / "in.png")
    assert run(["resize", "--method", "bicubic", "--scale", "0.5", "--antialias",
                str(tmp_path / "in.png"), str(tmp_path / "out.png")]) == EXIT_OK
    # ceil convention for odd sizes
    assert Image.open(tmp_path / "out.png").size == (15, 11)


def test_eval_baseline_report(corpus, capsys):
    code = run(["eval", "--model", "none", "--baseline", "bicubic", "--scale", "2",
                "--manifest", str(corpus / "set.txt"), "--shave", "2", "--report", str(corpus / "r.txt")])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    lines = out.splitlines()
    assert lines[0] == "image\tpsnr\tssim"
    assert [ln.split("\t")[0] for ln in lines[1:4]] == ["im0.png", "im1.png", "MEAN"]
    assert (corpus / "r.txt").read_text() == out


def test_train_resume_and_model_eval(corpus, trained, capsys):
    assert checkpoint_load(trained).step == 3
    cfg = corpus / "more.cfg"
    cfg.write_text(TINY_CONFIG.replace("iterations = 3", "iterations = 5"))
    code = run(["train", "--config", str(cfg), "--manifest", str(corpus / "set.txt"),
                "--out", str(corpus / "run2"), "--resume", str(corpus / "run" / "last.ckpt")])
    assert code == EXIT_OK
    steps = [ln.split("\t")[0] for ln in capsys.readouterr().out.splitlines() if ln[:1].isdigit()]
    assert steps == ["3", "4", "5"]
    assert run(["eval", "--model", str(trained), "--scale", "2", "--manifest", str(corpus / "set.txt")]) == EXIT_OK
    assert "mean-psnr=" in capsys.readouterr().out


def test_sr_and_visualize(corpus, trained):
    Image.fromarray(np.random.default_rng(1).integers(0, 256, (12, 14, 3)).astype(np.uint8)).save(corpus / "x.png")
    assert run(["sr", "--model", str(trained), "--in", str(corpus / "x.png"), "--out", str(corpus / "y.png"),
                "--tap-fields", str(corpus / "taps")]) == EXIT_OK
    y = Image.open(corpus / "y.png")
    assert y.size == (28, 24) and y.mode == "RGB"
    assert len(list((corpus / "taps" / "stage0").glob("filter_*.png"))) == 9
    assert run(["visualize", "--model", str(trained), "--in", str(corpus / "x.png"),
                "--grid", "0,0,3,3", "--out", str(corpus / "g.png")]) == EXIT_OK
    assert np.array(Image.open(corpus / "g.png")).shape == (13, 13, 3)
    assert run(["visualize", "--model", str(trained), "--in", str(corpus / "x.png"),
                "--grid", "27,0,3,3", "--out", str(corpus / "g2.png")]) == EXIT_USAGE


def test_sr_is_deterministic(corpus, trained):
    Image.fromarray(np.full((10, 10), 90, np.uint8)).save(corpus / "x.png")
    for name in ("a.png", "b.png"):
        assert run(["sr", "--model", str(trained), "--in", str(corpus / "x.png"), "--out", str(corpus / name)]) == 0
    assert (corpus / "a.png").read_bytes() == (corpus / "b.png").read_bytes()


def test_usage_errors(capsys):
    assert run([]) == EXIT_USAGE
    assert run(["resize", "--method", "cubic", "--scale", "2", "a", "b"]) == EXIT_USAGE
    assert run(["eval", "--manifest", "m.txt", "--scale", "2"]) == EXIT_USAGE
    assert capsys.readouterr().err


def test_data_errors(tmp_path, capsys):
    assert run(["sr", "--model", str(tmp_path / "none.ckpt"), "--in", "x.png", "--out", "y.png"]) == EXIT_DATA
    (tmp_path / "bad.ckpt").write_bytes(b"DAIR\x01")
    assert run(["sr", "--model", str(tmp_path / "bad.ckpt"), "--in", "x.png", "--out", "y.png"]) == EXIT_DATA
    (tmp_path / "bad.cfg").write_text("variant = dair\nwidth = 3\n")
    (tmp_path / "m.txt").write_text("")
    assert run(["train", "--config", str(tmp_path / "bad.cfg"), "--manifest", str(tmp_path / "m.txt"),
                "--out", str(tmp_path / "o")]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "none.ckpt" in err and "width" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_exits_three(corpus, capsys):
    (corpus / "hot.cfg").write_text(TINY_CONFIG.replace("seed = 4", "seed = 4\nlr0 = 1e30"))
    code = run(["train", "--config", str(corpus / "hot.cfg"), "--manifest", str(corpus / "set.txt"),
                "--out", str(corpus / "hot")])
    assert code == EXIT_NUMERIC
    assert "numeric fault" in capsys.readouterr().err
