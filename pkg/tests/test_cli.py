import json
import math

import numpy as np
import pytest

from curvistereo.cli import main
from curvistereo.core import DisparityMap
from curvistereo.io import read_disparity_csv, write_disparity_csv, write_image
from curvistereo.reconstruct import read_ply
from curvistereo.synth import make_misaligned_pair

SYNTH_FILES = {"left.png", "right.png", "det_left.png", "det_right.png", "gt_disparity.csv", "scene.json"}
TINY_TRAIN = ["--pairs", "2", "--epochs", "2", "--det-epochs", "1", "--features", "4", "4", "4",
              "--channels", "4", "--hourglasses", "1", "--d-max", "15", "--d0", "8", "--no-augment"]


def tree(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}


class TestSynth:
    def test_files_and_exit(self, tmp_path):
        assert main(["synth", "--curves", "5", "--phi", "8", "--seed", "7", "-o", str(tmp_path)]) == 0
        names = {p.name for p in tmp_path.iterdir()}
        assert names == SYNTH_FILES | {"synth_config.json"}
        cfg = json.loads((tmp_path / "synth_config.json").read_text())
        assert cfg["schema"] == 1 and cfg["curves"] == 5 and cfg["seed"] == 7

    def test_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--seed", "3", "-o", str(a)]) == 0
        assert main(["synth", "--seed", "3", "-o", str(b), "--threads", "4"]) == 0
        assert tree(a) == tree(b)

    def test_missing_out(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["synth", "--seed", "1"])
        assert err.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_config_file_and_override(self, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"schema": 1, "curves": 2, "seed": 5}))
        out = tmp_path / "o"
        assert main(["synth", "--config", str(conf), "--seed", "9", "-o", str(out)]) == 0
        cfg = json.loads((out / "synth_config.json").read_text())
        assert cfg["curves"] == 2 and cfg["seed"] == 9
        assert len(json.loads((out / "scene.json").read_text())["curves"]) == 2

    def test_config_errors(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"schema": 2}))
        assert main(["synth", "--config", str(bad), "-o", str(tmp_path / "x")]) == 2
        bad.write_text(json.dumps({"schema": 1, "colour": 3}))
        assert main(["synth", "--config", str(bad), "-o", str(tmp_path / "x")]) == 2
        assert "unknown keys" in capsys.readouterr().err


def write_pair(tmp_path, pair):
    write_image(tmp_path / "l.png", pair.left)
    write_image(tmp_path / "r.png", pair.right)
    return str(tmp_path / "l.png"), str(tmp_path / "r.png")


class TestRectify:
    def test_aligned(self, tmp_path):
        pair = make_misaligned_pair(np.random.default_rng(1), 0.0, (0.0, 0.0), size=(160, 160), noise=0.005)
        l, r = write_pair(tmp_path, pair)
        assert main(["rectify", l, r, "-o", str(tmp_path / "out")]) == 0
        side = json.loads((tmp_path / "out" / "rectify.json").read_text())
        assert abs(side["theta_deg"]) < 0.1
        assert math.hypot(side["t_x"], side["t_y"]) < 0.5
        assert side["inliers"] >= 10
        assert (tmp_path / "out" / "right_aligned.png").exists()

    def test_misaligned(self, tmp_path):
        pair = make_misaligned_pair(np.random.default_rng(2), 1.5, (6.0, -4.0), size=(160, 160), noise=0.005)
        l, r = write_pair(tmp_path, pair)
        assert main(["rectify", l, r, "-o", str(tmp_path / "out")]) == 0
        side = json.loads((tmp_path / "out" / "rectify.json").read_text())
        assert abs(side["theta_deg"] - 1.5) < 0.1
        assert abs(side["t_x"] - 6.0) < 0.5 and abs(side["t_y"] + 4.0) < 0.5

    def test_textureless(self, tmp_path, capsys):
        flat = np.full((64, 64), 0.5)
        write_image(tmp_path / "f.png", flat)
        f = str(tmp_path / "f.png")
        assert main(["rectify", f, f, "-o", str(tmp_path / "out")]) == 3
        assert "degenerate correspondences" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["rectify", str(tmp_path / "no.png"), str(tmp_path / "no.png"), "-o", str(tmp_path)]) == 1


class TestReconstructEval:
    def test_closed_form_depth(self, tmp_path):
        dm = DisparityMap(np.full((4, 6), 2.0), np.ones((4, 6), bool))
        write_disparity_csv(tmp_path / "d.csv", dm)
        out = tmp_path / "o"
        assert main(["reconstruct", str(tmp_path / "d.csv"), "--phi", "60", "--no-refine", "-o", str(out)]) == 0
        verts, _ = read_ply(out / "points.ply")
        assert len(verts) == 24
        np.testing.assert_allclose(verts[:, 2], 2.0, atol=1e-6)

    def test_pixel_size(self, tmp_path):
        dm = DisparityMap(np.full((2, 2), 2.0), np.ones((2, 2), bool))
        write_disparity_csv(tmp_path / "d.csv", dm)
        out = tmp_path / "o"
        assert main(["reconstruct", str(tmp_path / "d.csv"), "--phi", "60", "--no-refine",
                     "--pixel-size", "0.5", "-o", str(out)]) == 0
        np.testing.assert_allclose(read_ply(out / "points.ply")[0][:, 2], 1.0, atol=1e-6)

    def test_refine_needs_detections(self, tmp_path):
        write_disparity_csv(tmp_path / "d.csv", DisparityMap(np.zeros((2, 2)), np.ones((2, 2), bool)))
        assert main(["reconstruct", str(tmp_path / "d.csv"), "-o", str(tmp_path / "o")]) == 2

    def test_eval_identity(self, tmp_path):
        assert main(["synth", "--seed", "2", "-o", str(tmp_path / "s")]) == 0
        gt = str(tmp_path / "s" / "gt_disparity.csv")
        assert main(["eval", gt, gt, "--scene", str(tmp_path / "s" / "scene.json"), "-o", str(tmp_path / "e")]) == 0
        rep = json.loads((tmp_path / "e" / "metrics.json").read_text())
        assert rep["epe"] == 0.0
        assert rep["pct_gt_1"] == 0.0
        assert rep["depth_error"] < 0.5

    def test_eval_empty_is_degenerate(self, tmp_path):
        write_disparity_csv(tmp_path / "z.csv", DisparityMap(np.zeros((2, 2)), np.zeros((2, 2), bool)))
        z = str(tmp_path / "z.csv")
        assert main(["eval", z, z, "-o", str(tmp_path / "e")]) == 3


def test_full_pipeline(tmp_path):
    s, t, i, r, e = (tmp_path / n for n in "stire")
    assert main(["synth", "--seed", "4", "-o", str(s)]) == 0
    assert main(["train", "--data", str(s), *TINY_TRAIN, "-o", str(t)]) == 0
    hist = (t / "history.csv").read_text().splitlines()
    assert hist[0] == "epoch,L_disp,L_var,L_warp,total,epe_val" and len(hist) == 3
    assert main(["infer", str(s / "left.png"), str(s / "right.png"), "--weights", str(t / "weights.cswt"),
                 "-o", str(i)]) == 0
    assert read_disparity_csv(i / "disparity.csv").shape == (32, 64)
    assert main(["reconstruct", str(i / "disparity.csv"), "--det-left", str(i / "det_left.png"),
                 "--det-right", str(i / "det_right.png"), "-o", str(r)]) == 0
    assert (r / "points.ply").read_text().startswith("ply\n")
    code = main(["eval", str(i / "disparity.csv"), str(s / "gt_disparity.csv"), "--scene", str(s / "scene.json"),
                 "-o", str(e)])
    # an untrained detector may flag nothing on the ground-truth curve
    assert code in (0, 3)


def test_train_divergence(tmp_path, capsys):
    code = main(["train", *TINY_TRAIN, "--lr", "1e30", "--det-epochs", "0", "-o", str(tmp_path)])
    assert code == 4
    assert "diverged" in capsys.readouterr().err


def test_tomo_thread_invariant(tmp_path):
    args = ["tomo", "--width", "32", "--height", "6", "--depth", "30", "--curves", "2", "--views", "2", "5",
            "--total-views", "15", "--iterations", "10", "--seed", "1"]
    assert main(args + ["--threads", "1", "-o", str(tmp_path / "a")]) == 0
    assert main(args + ["--threads", "4", "-o", str(tmp_path / "b")]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    assert (tmp_path / "a" / "sweep.csv").read_text().startswith("n_views,stereo_err,wbp_err,sirt_err")


def test_train_negative_shift(tmp_path, capsys):
    assert main(["train", *TINY_TRAIN, "--shift", "-2", "-o", str(tmp_path)]) == 2
    assert "--shift" in capsys.readouterr().err
