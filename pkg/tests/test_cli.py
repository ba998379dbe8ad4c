import json
import subprocess
import sys

import numpy as np
import pytest

from splitsr.cli import main
from splitsr.metrics import load_png, save_png
from splitsr.model import SplitSR, preset, save_checkpoint


def json_prefix(text):
    """First JSON document in ``text``."""
    return json.JSONDecoder().raw_decode(text.lstrip())[0]


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "desk.bin"
    save_checkpoint(path, SplitSR(preset("desk"), seed=0))
    return path


@pytest.fixture
def png(tmp_path, rng):
    def make(h, w, name="in.png"):
        path = tmp_path / name
        save_png(rng.random((3, h, w)), path)
        return path
    return make


class TestFlops:
    def test_srresnet_budget(self, capsys):
        assert main(["flops", "--preset", "srresnet", "--input", "256x256"]) == 0
        rep = json_prefix(capsys.readouterr().out)
        assert rep["gflops"] == pytest.approx(166, rel=0.10)
        assert rep["params"] == pytest.approx(1.52e6, rel=0.02)

    def test_dcs_table(self, capsys):
        assert main(["flops", "--preset", "dcs", "--input", "256x256", "--a", "0.5"]) == 0
        out = capsys.readouterr().out
        rep = json_prefix(out)
        assert rep["a"] == [0.5] * 16 and "total" in out and "sr.trunk" in out

    def test_per_block_a(self, capsys):
        assert main(["flops", "--preset", "desk", "--input", "24x24", "--a", "0.25,1", "--json-only"]) == 0
        assert json.loads(capsys.readouterr().out)["a"] == [0.25, 1.0]

    @pytest.mark.parametrize("bad", ["256", "0x4", "axb"])
    def test_bad_size(self, bad):
        with pytest.raises(SystemExit) as exc:
            main(["flops", "--input", bad])
        assert exc.value.code == 2


class TestDispatch:
    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_console_entry(self):
        proc = subprocess.run([sys.executable, "-m", "splitsr.cli", "nope"], capture_output=True, text=True)
        assert proc.returncode == 2 and "usage" in proc.stderr

    def test_validation_failure_exit(self, tmp_path, capsys):
        assert main(["sr", str(tmp_path / "missing.png"), str(tmp_path / "o.png"), "--ckpt",
                     str(tmp_path / "nope.bin")]) == 1
        assert "error" in capsys.readouterr().err


class TestSr:
    def test_odd_input(self, ckpt, png, tmp_path, capsys):
        out = tmp_path / "out.png"
        assert main(["sr", str(png(17, 17)), str(out), "--ckpt", str(ckpt)]) == 0
        assert load_png(out).shape == (3, 34, 34)
        info = json.loads(capsys.readouterr().out)
        assert info["shape"] == [3, 34, 34] and len(info["a"]) == 2

    def test_fixed_a(self, ckpt, png, tmp_path, capsys):
        assert main(["sr", str(png(8, 10)), str(tmp_path / "o.png"), "--ckpt", str(ckpt), "--fixed-a", "1"]) == 0
        assert json.loads(capsys.readouterr().out)["a"] == [1.0, 1.0]

    def test_predict_degradation(self, ckpt, png, capsys):
        assert main(["predict-degradation", str(png(12, 12)), "--ckpt", str(ckpt)]) == 0
        info = json.loads(capsys.readouterr().out)
        assert len(info["u"]) == 33 and len(info["a"]) == 2 and info["gflops"] > 0

    def test_predict_without_predictors(self, png, tmp_path):
        path = tmp_path / "plain.bin"
        save_checkpoint(path, SplitSR(preset("desk", predictors=False)))
        assert main(["predict-degradation", str(png(8, 8)), "--ckpt", str(path)]) == 1


class TestDataCommands:
    def test_degrade(self, png, tmp_path, capsys):
        out = tmp_path / "lr.png"
        assert main(["degrade", str(png(50, 42)), str(out), "--level", "S2", "--scale", "2", "--seed", "3"]) == 0
        info = json.loads(capsys.readouterr().out)
        assert load_png(out).shape == (3, 24, 20)
        assert len(info["u"]) == 33 and info["level"] == "S2"

    def test_degrade_deterministic(self, png, tmp_path, capsys):
        src = png(32, 32)
        for name in ("a.png", "b.png"):
            main(["degrade", str(src), str(tmp_path / name), "--scale", "2", "--seed", "5"])
        capsys.readouterr()
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_synth_train_eval(self, tmp_path, capsys):
        assert main(["synth", "--procedural", "4", "--size", "64", "--count", "4", "--levels", "S0,S1",
                     "--out", str(tmp_path / "data")]) == 0
        manifest = capsys.readouterr().out.strip()
        assert main(["train", "--manifest", manifest, "--out", str(tmp_path / "run"), "--desk",
                     "--iterations", "2"]) == 0
        assert json.loads(capsys.readouterr().out)["iteration"] == 2
        ck = tmp_path / "run" / "checkpoint.bin"
        assert main(["train", "--manifest", manifest, "--out", str(tmp_path / "joint"), "--desk", "--stage",
                     "joint", "--init", str(ck), "--iterations", "1", "--sparsity", "2.0"]) == 0
        last = json.loads(capsys.readouterr().out)
        assert "l_a" in last and "l_reg" in last
        cfg = json.loads((tmp_path / "joint" / "config.json").read_text())
        assert cfg["weights"]["sparsity"] == 2.0
        csv_path = tmp_path / "res.csv"
        assert main(["eval", "--ckpt", str(tmp_path / "joint" / "checkpoint.bin"), "--manifest", manifest,
                     "--out", str(csv_path), "--json", str(tmp_path / "res.json")]) == 0
        assert "S1" in capsys.readouterr().out
        assert csv_path.read_text().startswith("id,level,psnr,ssim")
        assert len(json.loads((tmp_path / "res.json").read_text())["images"]) == 4

    def test_train_scale_mismatch_exit(self, tmp_path, capsys):
        main(["synth", "--procedural", "2", "--size", "48", "--count", "2", "--levels", "S0", "--scale", "3",
              "--out", str(tmp_path / "d")])
        manifest = capsys.readouterr().out.strip()
        assert main(["train", "--manifest", manifest, "--out", str(tmp_path / "r"), "--desk",
                     "--iterations", "1"]) == 1
        assert "scale" in capsys.readouterr().err
