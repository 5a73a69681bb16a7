import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from camofreq import __version__
from camofreq.cli import main, quantize, read_image
from camofreq.evalstat import InstanceMask
from camofreq.ingest import ImageInfo, write_coco, write_predictions

SMALL_CFG = {"input_hw": [32, 32], "channels": [4, 4, 6, 6], "lambda": 0.2, "k_filter": None,
             "toggles": {"cbom": True, "fdtim": True, "mffam_low": True, "mffam_high": True},
             "seed": 1, "training": {"steps": 2, "learning_rate": 0.05, "batch_size": 2}}


@pytest.fixture
def png(tmp_path, rng):
    arr = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    path = tmp_path / "a.png"
    Image.fromarray(arr).save(path)
    return path, arr


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL_CFG))
    return p


def load_png(path):
    with Image.open(path) as im:
        return np.asarray(im)


class TestImageIO:
    def test_round_half_even(self):
        assert quantize(np.array([0.5, 1.5, 2.5]) / 255).tolist() == [0, 2, 2]

    def test_exact_levels(self, png):
        path, arr = png
        np.testing.assert_array_equal(quantize(read_image(path)), arr)


class TestUsage:
    def test_version_everywhere(self, capsys):
        for cmd in ("cbom", "fdtim", "dwt", "train", "infer", "eval", "stats", "ablate", "synth"):
            with pytest.raises(SystemExit) as ei:
                main([cmd, "--version"])
            assert ei.value.code == 0
            assert __version__ in capsys.readouterr().out

    def test_unknown_flag(self, png, tmp_path):
        with pytest.raises(SystemExit) as ei:
            main(["fdtim", "--input", str(png[0]), "--out", str(tmp_path / "b.png"), "--bogus"])
        assert ei.value.code == 2

    def test_seed_required(self, tmp_path):
        with pytest.raises(SystemExit) as ei:
            main(["synth", "--out-dir", str(tmp_path)])
        assert ei.value.code == 2

    def test_missing_input_writes_nothing(self, tmp_path):
        out = tmp_path / "b.png"
        assert main(["fdtim", "--input", str(tmp_path / "nope.png"), "--out", str(out)]) == 2
        assert not out.exists()

    def test_k_too_large(self, png, tmp_path):
        out = tmp_path / "b.png"
        assert main(["fdtim", "--input", str(png[0]), "--k", "5000", "--out", str(out)]) == 2
        assert not out.exists()

    def test_module_entry(self):
        res = subprocess.run([sys.executable, "-m", "camofreq", "--version"], capture_output=True, text=True)
        assert res.returncode == 0 and __version__ in res.stdout


class TestImageCommands:
    def test_fdtim_k0_identity(self, png, tmp_path):
        out = tmp_path / "b.png"
        assert main(["fdtim", "--input", str(png[0]), "--k", "0", "--out", str(out)]) == 0
        np.testing.assert_array_equal(load_png(out), png[1])

    def test_fdtim_spectrum(self, png, tmp_path):
        args = ["fdtim", "--input", str(png[0]), "--k", "20", "--protect-dc",
                "--out", str(tmp_path / "b.png"), "--spectrum-out", str(tmp_path / "s.png")]
        assert main(args) == 0
        assert load_png(tmp_path / "s.png").shape == (32, 32)

    def test_dwt(self, png, tmp_path):
        out = tmp_path / "bands"
        assert main(["dwt", "--input", str(png[0]), "--out-dir", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        total = sum(b["energy"] for b in manifest["bands"].values())
        assert total == pytest.approx(float(np.sum((png[1] / 255.0) ** 2)), rel=1e-9)
        for name in ("LL", "LH", "HL", "HH"):
            assert load_png(out / f"{name}.png").shape == (16, 16)

    def test_cbom(self, png, tmp_path):
        out = tmp_path / "c.png"
        assert main(["cbom", "--input", str(png[0]), "--seed", "0", "--lambda", "0", "--out", str(out)]) == 0
        np.testing.assert_array_equal(load_png(out), png[1])
        assert main(["cbom", "--input", str(png[0]), "--out", str(out)]) == 2


class TestEvalStats:
    def fixture_files(self, tmp_path, shift=False):
        m = np.zeros((10, 12), dtype=bool)
        m[2:6, 3:9] = True
        gts = tmp_path / "gts.json"
        write_coco([ImageInfo(1, "one.png", 12, 10)], {1: [InstanceMask(m)]}, gts)
        preds = tmp_path / "preds.json"
        write_predictions({1: [InstanceMask(np.roll(m, 3, axis=1) if shift else m, 0.8)]}, preds)
        return gts, preds

    def test_eval_perfect(self, tmp_path):
        gts, preds = self.fixture_files(tmp_path)
        out = tmp_path / "report.json"
        assert main(["eval", "--preds", str(preds), "--gts", str(gts), "--out", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert rep["ap"] == 1.0 and rep["ap50"] == 1.0
        assert list(rep) == sorted(rep)

    def test_eval_bad_json(self, tmp_path, capsys):
        gts, _ = self.fixture_files(tmp_path)
        bad = tmp_path / "bad.json"
        bad.write_text('[{"image_id": 1,')
        out = tmp_path / "report.json"
        assert main(["eval", "--preds", str(bad), "--gts", str(gts), "--out", str(out)]) == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "InputError" and "offset" in err
        assert not out.exists()

    def test_stats(self, tmp_path):
        gts, _ = self.fixture_files(tmp_path)
        img = np.zeros((10, 12, 3), dtype=np.uint8)
        img[2:6, 3:9] = 200
        Image.fromarray(img).save(tmp_path / "one.png")
        out = tmp_path / "stats"
        assert main(["stats", "--annotations", str(gts), "--images", str(tmp_path), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_instances"] == 1
        assert summary["size_ratio_max"] == pytest.approx(24 / 120)
        assert summary["local_contrast_mean"] == pytest.approx(200 / 255)


class TestSynth:
    def test_deterministic_and_jobs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--seed", "4", "--n", "3", "--size", "32", "--out-dir", str(a)]) == 0
        assert main(["synth", "--seed", "4", "--n", "3", "--size", "32", "--jobs", "2",
                     "--out-dir", str(b)]) == 0
        assert (a / "annotations.json").read_text() == (b / "annotations.json").read_text()
        for i in range(3):
            np.testing.assert_array_equal(load_png(a / "images" / f"{i:05d}.png"),
                                          load_png(b / "images" / f"{i:05d}.png"))
        doc = json.loads((a / "annotations.json").read_text())
        assert len(doc["images"]) == 3 and len(doc["annotations"]) >= 3

    def test_bad_range(self, tmp_path):
        assert main(["synth", "--seed", "1", "--min-instances", "4", "--max-instances", "2",
                     "--out-dir", str(tmp_path / "x")]) == 2
        assert not (tmp_path / "x").exists()


class TestModelCommands:
    def test_train_then_infer(self, tmp_path, cfg_file, png):
        params, logf = tmp_path / "p.bin", tmp_path / "log.csv"
        assert main(["train", "--config", str(cfg_file), "--out", str(params), "--log", str(logf),
                     "--n-train", "4"]) == 0
        rows = list(csv.reader(logf.open()))
        assert rows[0] == ["step", "loss"] and len(rows) == 3
        mask, inst = tmp_path / "m.png", tmp_path / "i.json"
        assert main(["infer", "--params", str(params), "--config", str(cfg_file), "--input", str(png[0]),
                     "--out", str(mask), "--instances", str(inst)]) == 0
        assert set(np.unique(load_png(mask))) <= {0, 255}
        assert isinstance(json.loads(inst.read_text()), list)

    def test_train_needs_seed(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"input_hw": [32, 32]}))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "p.bin")]) == 2

    def test_infer_size_mismatch(self, tmp_path, cfg_file, rng):
        params = tmp_path / "p.bin"
        main(["train", "--config", str(cfg_file), "--out", str(params), "--n-train", "2"])
        big = tmp_path / "big.png"
        Image.fromarray(rng.integers(0, 256, size=(48, 48, 3), dtype=np.uint8)).save(big)
        assert main(["infer", "--params", str(params), "--config", str(cfg_file), "--input", str(big),
                     "--out", str(tmp_path / "m.png")]) == 1

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({**SMALL_CFG, "optimizer": "adamw"}))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "p.bin")]) == 1
        assert not (tmp_path / "p.bin").exists()

    def test_ablate_lambda(self, tmp_path, cfg_file):
        out = tmp_path / "r.csv"
        assert main(["ablate", "--grid", "lambda", "--seed", "0", "--config", str(cfg_file), "--steps", "1",
                     "--n-train", "2", "--n-test", "2", "--out", str(out)]) == 0
        rows = list(csv.DictReader(out.open()))
        assert [float(r["lambda"]) for r in rows] == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
