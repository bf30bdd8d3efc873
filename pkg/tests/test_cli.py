import csv
from pathlib import Path

import numpy as np
import pytest

from ifes import cli, gradcheck, network
from ifes.checkpoint import save_checkpoint
from ifes.config import RunConfig, load_config
from ifes.errors import ConfigError
from ifes.imageio import load_gray_image
from ifes.network import NetConfig, build_network

DATA = Path(__file__).parent / "data"
FAST = ["--set", "scale=16", "--set", "stages=2", "--set", "patch=0", "--set", "iterations=3"]


@pytest.fixture(scope="module")
def pairs_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("pairs")
    assert cli.main(["synth", str(d), "--count", "3", "--size", "24", "--seed", "4"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(pairs_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--set", f"data_dir={pairs_dir}", *FAST, "--out", str(out)]) == 0
    return out


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.stages, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay) == (3, 1e-4, 0.9, 0.999, 5e-3)
        assert (cfg.tau, cfg.xi, cfg.ssim_const, cfg.window, cfg.batch) == (1.0, 1.7, 9e-4, 16, 1)
        assert (cfg.scale, cfg.patch) == (8, 64)

    def test_file_then_overrides(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# comment\nstages = 2\nsmooth = yes\nlr = 3e-4  # trailing\n\n")
        cfg = load_config(p, ["lr=1e-3"])
        assert cfg.stages == 2 and cfg.smooth is True and cfg.lr == 1e-3

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("stages = 2\nlearning_rate = 1\n")
        with pytest.raises(ConfigError, match=":2: unknown key 'learning_rate'"):
            load_config(p)

    @pytest.mark.parametrize("item", ["stages=two", "variant=deep", "batch=4", "novalue", "recon_loss=l2"])
    def test_bad_values(self, item):
        with pytest.raises(ConfigError):
            load_config(None, [item])

    def test_dump_round_trip(self, tmp_path):
        cfg = RunConfig(stages=4, smooth=True, variant="hc")
        p = tmp_path / "echo.cfg"
        p.write_text(cfg.dumps())
        assert load_config(p) == cfg


class TestTrain:
    def test_artifacts(self, trained):
        assert {p.name for p in trained.iterdir()} >= {"checkpoint.ifes", "train_log.csv", "run.txt", "loss_curves.png"}
        rows = list(csv.DictReader(open(trained / "train_log.csv")))
        assert [r["iteration"] for r in rows] == ["1", "2", "3"]
        assert list(rows[0]) == ["iteration", "L_I", "L_V", "L_F", "L_M", "total", "elapsed"]
        for r in rows:
            terms = [float(r[k]) for k in ("L_I", "L_V", "L_F", "L_M")]
            assert float(r["total"]) == pytest.approx(sum(terms), rel=1e-12)
        echo = (trained / "run.txt").read_text()
        assert "stages = 2" in echo and "checkpoint.ifes" in echo

    def test_same_seed_same_bytes(self, pairs_dir, trained, tmp_path):
        assert cli.main(["train", "--set", f"data_dir={pairs_dir}", *FAST, "--out", str(tmp_path)]) == 0
        assert (tmp_path / "checkpoint.ifes").read_bytes() == (trained / "checkpoint.ifes").read_bytes()

    def test_env_output_dir(self, pairs_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("IFES_OUTPUT_DIR", str(tmp_path / "envout"))
        assert cli.main(["train", "--set", f"data_dir={pairs_dir}", *FAST[:-1], "iterations=1"]) == 0
        assert (tmp_path / "envout" / "checkpoint.ifes").exists()

    def test_no_ifem_trains(self, pairs_dir, tmp_path):
        assert cli.main(["train", "--set", f"data_dir={pairs_dir}", *FAST, "--set", "variant=no_ifem", "--out", str(tmp_path)]) == 0

    def test_errors_before_training(self, tmp_path):
        assert cli.main(["train", "--set", "stages=2", "--out", str(tmp_path)]) == 2  # no data_dir
        assert cli.main(["train", "--set", f"data_dir={tmp_path / 'missing'}", "--out", str(tmp_path)]) == 3
        assert not (tmp_path / "checkpoint.ifes").exists()

    def test_patch_larger_than_images(self, pairs_dir, tmp_path):
        assert cli.main(["train", "--set", f"data_dir={pairs_dir}", "--set", "patch=64", "--out", str(tmp_path)]) == 2


class TestFuse:
    def _fuse(self, ckpt, pairs_dir, out, *extra):
        ir, vis = pairs_dir / "scene000_ir.pgm", pairs_dir / "scene000_vis.pgm"
        return cli.main(["fuse", str(ckpt), str(ir), str(vis), str(out), *extra])

    def test_repeatable_with_maps(self, trained, pairs_dir, tmp_path):
        ckpt = trained / "checkpoint.ifes"
        assert self._fuse(ckpt, pairs_dir, tmp_path / "a.pgm", "--maps", "--figure", str(tmp_path / "p.png")) == 0
        assert self._fuse(ckpt, pairs_dir, tmp_path / "b.pgm") == 0
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()
        for m in ("a_w1.pgm", "a_w2.pgm"):
            px = load_gray_image(tmp_path / m).as_unit()
            assert px.min() >= 0 and px.max() <= 1
        assert (tmp_path / "p.png").stat().st_size > 0

    def test_smooth_on_constant_maps(self, pairs_dir, tmp_path):
        net = build_network(NetConfig(stages=1, scale=16, seed=1))
        for head in net.wmap_heads:
            head[-1].weights[:] = 0.0  # maps become sigmoid(bias), a constant
        save_checkpoint(net, tmp_path / "c.ifes")
        assert self._fuse(tmp_path / "c.ifes", pairs_dir, tmp_path / "plain.pgm") == 0
        assert self._fuse(tmp_path / "c.ifes", pairs_dir, tmp_path / "smooth.pgm", "--smooth") == 0
        assert (tmp_path / "plain.pgm").read_bytes() == (tmp_path / "smooth.pgm").read_bytes()

    def test_corrupt_checkpoint(self, trained, pairs_dir, tmp_path):
        data = bytearray((trained / "checkpoint.ifes").read_bytes())
        data[100] ^= 0xFF
        (tmp_path / "bad.ifes").write_bytes(bytes(data))
        assert self._fuse(tmp_path / "bad.ifes", pairs_dir, tmp_path / "x.pgm") == 4

    def test_unregistered(self, trained, pairs_dir, tmp_path):
        (tmp_path / "small.pgm").write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        code = cli.main(
            ["fuse", str(trained / "checkpoint.ifes"), str(pairs_dir / "scene000_ir.pgm"), str(tmp_path / "small.pgm"), str(tmp_path / "x.pgm")]
        )
        assert code == 3


class TestEval:
    def test_golden(self, capsys):
        assert cli.main(["eval", str(DATA / "eval")]) == 0
        assert capsys.readouterr().out == (DATA / "eval" / "golden.csv").read_text()

    def test_out_file_and_figure(self, tmp_path):
        assert cli.main(["eval", str(DATA / "eval"), "--out", str(tmp_path / "m.csv")]) == 0
        assert (tmp_path / "m.csv").read_text() == (DATA / "eval" / "golden.csv").read_text()
        assert (tmp_path / "m.png").exists()

    def test_identical_triple(self, tmp_path, capsys):
        px = np.random.default_rng(0).integers(0, 256, size=(16, 16), dtype=np.uint8).tobytes()
        for suf in ("_ir", "_vis", "_fused"):
            (tmp_path / f"s{suf}.pgm").write_bytes(b"P5\n16 16\n255\n" + px)
        assert cli.main(["eval", str(tmp_path)]) == 0
        row = dict(zip(*[l.split(",") for l in capsys.readouterr().out.splitlines()[:2]]))
        assert float(row["MI"]) == pytest.approx(2 * float(row["EN"]), abs=1e-4)
        assert row["SSIM"] == "1.0000"

    def test_incomplete_triple(self, tmp_path, capsys):
        for f in ("alpha_ir", "alpha_vis", "alpha_fused", "beta_ir", "beta_vis"):
            (tmp_path / f"{f}.pgm").write_bytes((DATA / "eval" / f"{f}.pgm").read_bytes())
        assert cli.main(["eval", str(tmp_path)]) == 3
        captured = capsys.readouterr()
        assert "beta_ir.pgm" in captured.err
        assert [l.split(",")[0] for l in captured.out.splitlines()] == ["image", "alpha", "mean"]


class TestGradcheck:
    def test_passes(self, capsys):
        assert cli.main(["gradcheck", "--samples", "2"]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith(("PASS", "FAIL"))]
        assert len(lines) == 12 and all(l.startswith("PASS") for l in lines)

    def test_deterministic(self):
        a = [r.max_rel_error for r in gradcheck.run_gradcheck(seed=3, samples=2)]
        b = [r.max_rel_error for r in gradcheck.run_gradcheck(seed=3, samples=2)]
        assert a == b

    def test_corrupted_backward_is_caught(self, monkeypatch, capsys):
        real = network.conv2d_backward

        def skewed(cache, layer, grad):
            gx, gw, gb = real(cache, layer, grad)
            return gx, gw * 1.001, gb

        monkeypatch.setattr(network, "conv2d_backward", skewed)
        monkeypatch.setattr(gradcheck, "conv2d_backward", skewed)
        assert cli.main(["gradcheck", "--samples", "2"]) == 5
        out = capsys.readouterr().out
        assert "FAIL conv.relu" in out and "FAIL network.full" in out
        assert "PASS loss.ssim" in out


class TestAblate:
    def test_stage_variants(self, pairs_dir, tmp_path):
        code = cli.main(
            ["ablate", "--set", f"data_dir={pairs_dir}", *FAST, "--variants", "s1,s2,full,no_ifem", "--out", str(tmp_path)]
        )
        assert code == 0
        rows = list(csv.reader(open(tmp_path / "ablation.csv")))
        assert rows[0] == ["variant", "stages", "AG", "EN", "MI", "GLD", "SF", "SSIM", "VIFF"]
        assert [(r[0], r[1]) for r in rows[1:]] == [("s1", "1"), ("s2", "2"), ("full", "2"), ("no_ifem", "2")]
        assert rows[3][2:] != rows[4][2:]
        assert (tmp_path / "ablation.png").exists()
        assert (tmp_path / "s1" / "checkpoint.ifes").exists()

    def test_unknown_variant(self, pairs_dir, tmp_path):
        assert cli.main(["ablate", "--set", f"data_dir={pairs_dir}", "--variants", "deeper", "--out", str(tmp_path)]) == 2
        assert not (tmp_path / "ablation.csv").exists()
