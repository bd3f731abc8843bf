import json

import numpy as np
import pytest

from camscope.cli import EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_IO, EXIT_OK, main, parse_args
from camscope.render import RgbImage, write_pgm, write_ppm
from camscope.trainer import synth_dataset
from camscope.unet import UNetConfig, build_unet, load_weights, save_weights

SMALL = ["--depth", "2", "--channels", "8,4"]


@pytest.fixture(scope="module")
def cam_inputs(tmp_path_factory):
    d = tmp_path_factory.mktemp("cam_inputs")
    save_weights(build_unet(UNetConfig(depth=2, channels=(8, 4), seed=1)), d / "m.csw")
    (s,) = synth_dataset(1, 3, 16, 16, seed=2)
    write_pgm(np.floor(s.image.data[0, 0] * 255 + 0.5).astype(np.uint8), d / "img.pgm")
    return d


def cam_args(d, out, *extra):
    return ["cam", "--model", str(d / "m.csw"), "--image", str(d / "img.pgm"),
            "--out-dir", str(out), *extra]


class TestTrain:
    def test_missing_out_is_config_error(self, capsys):
        assert main(["train", "--synthetic", "n=2,classes=2,size=16"]) == EXIT_CONFIG
        assert "--out" in capsys.readouterr().err

    def test_default_lr(self):
        assert parse_args(["train", "--out", "x"]).lr == 3e-3

    def test_small_synthetic_run(self, tmp_path):
        out = tmp_path / "w" / "m.csw"
        code = main(["train", "--synthetic", "n=3,classes=3,size=16", "--epochs", "2",
                     "--out", str(out), *SMALL])
        assert code == EXIT_OK
        assert load_weights(out).config == UNetConfig(2, (8, 4), 1, 3, 0)
        lines = out.with_suffix(".csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,f1,iou" and len(lines) == 3

    def test_data_dir(self, tmp_path):
        data = tmp_path / "data"
        data.mkdir()
        for k, s in enumerate(synth_dataset(2, 2, 8, 8, seed=0)):
            write_pgm((s.image.data[0, 0] * 255).astype(np.uint8), data / f"s{k}.pgm")
            write_pgm(s.label.astype(np.uint8), data / f"s{k}.label.pgm")
        out = tmp_path / "m.csw"
        assert main(["train", "--data-dir", str(data), "--epochs", "1", "--out", str(out),
                     "--depth", "2", "--channels", "4,2"]) == EXIT_OK
        assert load_weights(out).num_classes == 2

    def test_missing_data_dir(self, tmp_path):
        assert main(["train", "--data-dir", str(tmp_path / "nope"), "--out", str(tmp_path / "m")]) == EXIT_IO

    def test_bad_channels(self, tmp_path):
        assert main(["train", "--synthetic", "n=1", "--out", str(tmp_path / "m"),
                     "--depth", "2", "--channels", "8"]) == EXIT_CONFIG

    def test_config_file_and_flag_precedence(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("command=train\n# comment\nlr=0.25\nepochs=7\nout=from_config.csw\n")
        args = parse_args(["train", "--config", str(cfg), "--epochs", "2"])
        assert (args.lr, args.epochs, args.out) == (0.25, 2, "from_config.csw")

    def test_config_unknown_key(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("learning_rate=0.1\n")
        assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.cfg")]) == EXIT_IO


class TestCam:
    def test_writes_three_ppms(self, cam_inputs, tmp_path):
        out = tmp_path / "o"
        assert main(cam_args(cam_inputs, out)) == EXIT_OK
        names = sorted(p.name for p in out.iterdir())
        assert names == ["pixelset.ppm", "prediction.ppm", "seg_hires_grad_bottleneck_c1.ppm"]
        assert (out / "prediction.ppm").read_bytes().startswith(b"P6\n16 16\n255\n")

    def test_all_methods_all_layers(self, cam_inputs, tmp_path):
        out = tmp_path / "o"
        assert main(cam_args(cam_inputs, out, "--method", "all", "--layers", "all",
                             "--class", "2", "--jobs", "2")) == EXIT_OK
        maps = [p for p in out.iterdir() if p.name.startswith("seg_")]
        assert len(maps) == 3 * 3
        assert (out / "seg_xres_enc1.post_c2.ppm").exists()

    def test_unknown_method_and_layer(self, cam_inputs, tmp_path, capsys):
        assert main(cam_args(cam_inputs, tmp_path, "--method", "gradcam++")) == EXIT_CONFIG
        assert main(cam_args(cam_inputs, tmp_path, "--layer", "enc9.post")) == EXIT_CONFIG
        assert "bottleneck" in capsys.readouterr().err

    def test_xres_window_one_matches_hires(self, cam_inputs, tmp_path):
        out = tmp_path / "o"
        assert main(cam_args(cam_inputs, out, "--method", "seg_hires_grad,seg_xres",
                             "--xres-window", "1", "--pixel-set", "rect:2,2,9,9")) == EXIT_OK
        assert (out / "seg_xres_bottleneck_c1.ppm").read_bytes() == \
            (out / "seg_hires_grad_bottleneck_c1.ppm").read_bytes()

    def test_deterministic_bytes(self, cam_inputs, tmp_path):
        for run in ("a", "b"):
            assert main(cam_args(cam_inputs, tmp_path / run, "--method", "all")) == EXIT_OK
        for p in (tmp_path / "a").iterdir():
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()

    def test_bad_inputs(self, cam_inputs, tmp_path):
        assert main(cam_args(cam_inputs, tmp_path, "--class", "5")) == EXIT_CONFIG
        assert main(cam_args(cam_inputs, tmp_path, "--pixel-set", "rect:0,0,99,0")) == EXIT_CONFIG
        assert main(["cam", "--model", str(tmp_path / "missing.csw"), "--image",
                     str(cam_inputs / "img.pgm"), "--out-dir", str(tmp_path)]) == EXIT_IO
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"P5\n16 16\n255\n" + bytes(3))
        assert main(["cam", "--model", str(cam_inputs / "m.csw"), "--image", str(bad),
                     "--out-dir", str(tmp_path)]) == EXIT_IO
        odd = tmp_path / "odd.ppm"
        write_ppm(RgbImage(np.zeros((15, 16, 3))), odd)
        assert main(["cam", "--model", str(cam_inputs / "m.csw"), "--image", str(odd),
                     "--out-dir", str(tmp_path)]) == EXIT_CONFIG


class TestGradcheck:
    def test_passes(self, capsys):
        assert main(["gradcheck"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "conv2d" in out and "unet" in out and "FAIL" not in out

    def test_injected_fault_fails(self, capsys):
        assert main(["gradcheck", "--inject-fault", "relu"]) == EXIT_CHECK_FAILED
        assert "FAIL" in capsys.readouterr().out


class TestDemo:
    SMALL_DEMO = ["--n", "3", "--test-n", "2", "--size", "16", "--epochs", "1", *SMALL]

    def test_small_demo_is_deterministic(self, tmp_path):
        for run in ("a", "b"):
            assert main(["demo", "--out-dir", str(tmp_path / run), *self.SMALL_DEMO]) == EXIT_OK
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert {str(f) for f in files} >= {"model.csw", "metrics.csv", "summary.json",
                                           "panels/test00.ppm", "panels/test01.ppm"}
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        summary = json.loads((tmp_path / "a" / "summary.json").read_text())
        assert set(summary["win_rate"]) == {"1", "2"}

    def test_skip_train_reuses_model(self, tmp_path):
        assert main(["demo", "--out-dir", str(tmp_path / "a"), *self.SMALL_DEMO]) == EXIT_OK
        model = tmp_path / "a" / "model.csw"
        assert main(["demo", "--out-dir", str(tmp_path / "b"), *self.SMALL_DEMO,
                     "--skip-train", "--model", str(model)]) == EXIT_OK
        assert not (tmp_path / "b" / "model.csw").exists()
        assert (tmp_path / "a" / "summary.json").read_text() == (tmp_path / "b" / "summary.json").read_text()

    def test_skip_train_needs_model(self, tmp_path):
        assert main(["demo", "--out-dir", str(tmp_path), "--skip-train"]) == EXIT_CONFIG


def test_no_command():
    assert main([]) == EXIT_CONFIG
