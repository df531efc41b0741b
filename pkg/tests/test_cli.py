"""Command-line surface: exit codes, artifacts, determinism."""

import json
import math
import os

import numpy as np
import pytest

from hma.cli import main
from hma.imaging import ImageF32, load_image, save_image
from hma.model import HmaConfig, HmaModel
from hma.training import checkpoint_load, checkpoint_save, make_texture_image


def tiny_cfg_dict(scale=2):
    # grid_extent 32 covers the 64 px toy training patches at K=2
    return dict(scale=scale, channels=8, window=4, grid_interval=2, n_rhtb=1,
                n_fab=1, heads_fab=1, heads_gab_grid=1, heads_gab_win=1,
                expansion_rate=2, shrink_rate=2, mlp_ratio=2, grid_extent=32)


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_cfg_dict()))
    return str(path)


@pytest.fixture
def hr_dir(tmp_path):
    # big enough for one 64 px LR training patch at scale 2, odd on purpose
    d = tmp_path / "hr"
    d.mkdir()
    for i in range(2):
        save_image(make_texture_image(130, seed=60 + i).to_u8(), str(d / f"img{i}.png"))
    return str(d)


@pytest.fixture
def ckpt(tmp_path):
    cfg = HmaConfig(**tiny_cfg_dict()).validate()
    model = HmaModel.init(cfg, seed=1)
    path = str(tmp_path / "model.ckpt")
    checkpoint_save(path, model)
    return path


class TestTrain:
    def test_toy_preset_builtin_set(self, tmp_path, cfg_path, capsys):
        out = str(tmp_path / "out.ckpt")
        code = main(["train", "--config", cfg_path, "--out", out,
                     "--preset", "toy", "--iters", "3", "--seed", "4"])
        assert code == 0
        assert os.path.exists(out)
        assert os.path.exists(out + ".loss.csv")
        lines = open(out + ".loss.csv").read().strip().split("\n")
        assert lines[0] == "iteration,loss" and len(lines) == 4
        ck = checkpoint_load(out)
        assert ck.iteration == 3


    def test_missing_config_is_usage_error(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "x.ckpt")]) == 1

    def test_unknown_flag_rejected(self, cfg_path, tmp_path):
        assert main(["train", "--config", cfg_path, "--out",
                     str(tmp_path / "x.ckpt"), "--frobnicate", "1"]) == 1

    def test_unreadable_data_dir_is_data_error(self, cfg_path, tmp_path):
        assert main(["train", "--config", cfg_path, "--out", str(tmp_path / "x.ckpt"),
                     "--data-dir", str(tmp_path / "missing"), "--iters", "1"]) == 2

    def test_folder_training(self, cfg_path, hr_dir, tmp_path):
        out = str(tmp_path / "f.ckpt")
        code = main(["train", "--config", cfg_path, "--data-dir", hr_dir, "--out", out,
                     "--iters", "2", "--patches-per-image", "2"])
        assert code == 0 and os.path.exists(out)

    def test_init_ckpt_transfer_report_printed(self, tmp_path, capsys):
        cfg3 = tmp_path / "cfg3.json"
        cfg3.write_text(json.dumps(tiny_cfg_dict(scale=3)))
        src_model = HmaModel.init(HmaConfig(**tiny_cfg_dict(scale=2)).validate(), seed=2)
        src = str(tmp_path / "src.ckpt")
        checkpoint_save(src, src_model)
        out = str(tmp_path / "warm.ckpt")
        code = main(["train", "--config", str(cfg3), "--out", out,
                     "--iters", "1", "--init-ckpt", src])
        assert code == 0
        text = capsys.readouterr().out
        assert "copied" in text and "reinitialized" in text
        assert "recon.up0.w" in text  # scale change reinitializes upsampling

    def test_non_finite_loss_exit_3(self, cfg_path, tmp_path):
        cfg = HmaConfig(**tiny_cfg_dict()).validate()
        model = HmaModel.init(cfg, seed=3)
        model.params["shallow.w"].data[:] = np.nan
        bad = str(tmp_path / "bad.ckpt")
        checkpoint_save(bad, model)
        code = main(["train", "--config", cfg_path, "--out", str(tmp_path / "o.ckpt"),
                     "--iters", "1", "--init-ckpt", bad])
        assert code == 3


class TestUpscale:
    def test_dimensions_and_determinism(self, ckpt, tmp_path):
        lr = make_texture_image(16, seed=70)
        inp = str(tmp_path / "in.png")
        save_image(lr.to_u8(), inp)
        outs = []
        for name in ("a.png", "b.png"):
            out = str(tmp_path / name)
            assert main(["upscale", "--ckpt", ckpt, "--input", inp, "--output", out,
                         "--tile", "8", "--overlap", "4"]) == 0
            outs.append(open(out, "rb").read())
        assert outs[0] == outs[1]
        img = load_image(str(tmp_path / "a.png"))
        assert (img.height, img.width) == (32, 32)

    def test_bad_input_exit_2(self, ckpt, tmp_path):
        assert main(["upscale", "--ckpt", ckpt, "--input", str(tmp_path / "nope.png"),
                     "--output", str(tmp_path / "o.png")]) == 2

    def test_non_multiple_size_padded(self, ckpt, tmp_path):
        lr = make_texture_image(18, seed=71)  # not a multiple of the tile
        inp = str(tmp_path / "odd.png")
        save_image(lr.to_u8(), inp)
        out = str(tmp_path / "o.png")
        assert main(["upscale", "--ckpt", ckpt, "--input", inp, "--output", out,
                     "--tile", "8", "--overlap", "2"]) == 0
        img = load_image(out)
        assert (img.height, img.width) == (36, 36)


class TestEval:
    def test_single_image_report(self, ckpt, tmp_path, capsys):
        d = tmp_path / "one"
        d.mkdir()
        save_image(make_texture_image(24, seed=72).to_u8(), str(d / "x.png"))
        report = str(tmp_path / "r.csv")
        code = main(["eval", "--ckpt", ckpt, "--hr-dir", str(d), "--report", report,
                     "--tile", "8", "--overlap", "2"])
        assert code == 0
        lines = open(report).read().strip().split("\n")
        assert lines[0] == "image,psnr_db,ssim"
        assert len(lines) == 3 and lines[-1].startswith("mean,")

    def test_bicubic_baseline(self, hr_dir, tmp_path):
        report = str(tmp_path / "b.csv")
        code = main(["eval", "--baseline-bicubic", "--scale", "2",
                     "--hr-dir", hr_dir, "--report", report])
        assert code == 0
        rows = open(report).read().strip().split("\n")[1:]
        for row in rows:
            psnr = float(row.split(",")[1])
            assert math.isfinite(psnr) and psnr > 10.0

    def test_odd_dimensions_no_crash(self, ckpt, tmp_path):
        d = tmp_path / "odd"
        d.mkdir()
        img = ImageF32(np.random.default_rng(0).random((25, 23, 3), dtype=np.float32))
        save_image(img.to_u8(), str(d / "odd.png"))
        assert main(["eval", "--ckpt", ckpt, "--hr-dir", str(d),
                     "--tile", "8", "--overlap", "2"]) == 0

    def test_empty_folder_exit_2(self, ckpt, tmp_path):
        d = tmp_path / "empty"
        d.mkdir()
        assert main(["eval", "--ckpt", ckpt, "--hr-dir", str(d)]) == 2


class TestDegrade:
    def test_ceil_dimensions(self, tmp_path):
        save_image(make_texture_image(25, seed=73).to_u8(), str(tmp_path / "i.png"))
        out = str(tmp_path / "o.png")
        assert main(["degrade", "--input", str(tmp_path / "i.png"),
                     "--scale", "2", "--output", out]) == 0
        img = load_image(out)
        assert (img.height, img.width) == (13, 13)


class TestCount:
    def test_prints_breakdown_and_total(self, cfg_path, capsys):
        assert main(["count", "--config", cfg_path]) == 0
        out = capsys.readouterr().out
        assert "submodule" in out and "total" in out
        assert "fused_conv" in out and "gab_grid_branch" in out

    def test_shallow_conv_row_closed_form(self, tmp_path, capsys):
        path = tmp_path / "paper.json"
        path.write_text(json.dumps({"scale": 4}))
        assert main(["count", "--config", str(path)]) == 0
        out = capsys.readouterr().out
        assert "5,040" in out  # 180*3*9 + 180


class TestCka:
    def test_self_similarity_diagonal(self, ckpt, tmp_path):
        report = str(tmp_path / "cka.csv")
        code = main(["cka", "--ckpt-a", ckpt, "--ckpt-b", ckpt, "--report", report])
        assert code == 0
        lines = open(report).read().strip().split("\n")
        grid = [row.split(",")[1:] for row in lines[1:]]
        for i in range(len(grid)):
            assert abs(float(grid[i][i]) - 1.0) < 1e-6

    def test_g_vs_q_report_shape(self, ckpt, tmp_path):
        report = str(tmp_path / "gq.csv")
        assert main(["cka", "--ckpt-a", ckpt, "--report", report]) == 0
        lines = open(report).read().strip().split("\n")
        assert "grid.g" in lines[1]
        assert len(lines) == 2  # header + one residual group in the tiny config


class TestTransfer:
    def test_writes_checkpoint_and_report(self, tmp_path, capsys):
        src_model = HmaModel.init(HmaConfig(**tiny_cfg_dict(scale=3)).validate(), seed=5)
        src = str(tmp_path / "src3.ckpt")
        checkpoint_save(src, src_model)
        cfg4 = tmp_path / "cfg4.json"
        cfg4.write_text(json.dumps(tiny_cfg_dict(scale=4)))
        out = str(tmp_path / "x4.ckpt")
        code = main(["transfer", "--from", src, "--to-config", str(cfg4), "--out", out])
        assert code == 0
        text = capsys.readouterr().out
        assert "reinitialized recon.up" in text
        ck = checkpoint_load(out)
        assert ck.config.scale == 4
        np.testing.assert_array_equal(ck.params["shallow.w"],
                                      src_model.params["shallow.w"].data)

    def test_corrupt_checkpoint_exit_2(self, tmp_path):
        bad = str(tmp_path / "bad.ckpt")
        open(bad, "wb").write(b"JUNKJUNK")
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(tiny_cfg_dict()))
        assert main(["transfer", "--from", bad, "--to-config", str(cfg),
                     "--out", str(tmp_path / "o.ckpt")]) == 2


class TestAtomicity:
    def test_failed_upscale_leaves_no_partial_output(self, ckpt, tmp_path):
        out = str(tmp_path / "never.png")
        code = main(["upscale", "--ckpt", ckpt, "--input", str(tmp_path / "missing.png"),
                     "--output", out])
        assert code == 2
        assert not os.path.exists(out)
