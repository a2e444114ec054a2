import csv
import json
import shutil

import numpy as np
import pytest

from artgauss import io
from artgauss.cli import EXIT_FAILURE, EXIT_INPUT, EXIT_OK, main

SMALL = ["--n-static", "300", "--n-mobile", "150", "--n-cameras", "2", "--resolution", "24"]
FAST = ["--k-mobile", "2", "--k-cross", "2", "--max-iters", "400"]


@pytest.fixture(scope="module")
def hinge_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene") / "hinge"
    assert main(["synth", "--archetype", "hinge", "--seed", "1", "--out", str(out), *SMALL]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def hinge_fit(hinge_scene, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    code = main(["fit", str(hinge_scene), "--out", str(out), "--seed", "3", *FAST])
    return out, code


class TestSynth:
    def test_deterministic(self, hinge_scene, tmp_path):
        again = tmp_path / "again"
        assert main(["synth", "--archetype", "hinge", "--seed", "1", "--out", str(again), *SMALL]) == EXIT_OK
        for name in ("state0.ply", "state1.ply", "truth.json", "cameras.json", "manifest.json"):
            assert (again / name).read_bytes() == (hinge_scene / name).read_bytes()

    def test_manifest_describes_files(self, hinge_scene):
        manifest = io.read_json(hinge_scene / "manifest.json", "manifest")
        assert manifest["archetype"] == "hinge" and manifest["kind"] == "revolute"
        for f in manifest["files"]:
            data = (hinge_scene / f["name"]).read_bytes()
            assert io.sha256(data) == f["sha256"]
            if "elements" in f:
                assert len(io.decode_ply(data).gaussians) == f["elements"] == 450

    def test_truth_schema(self, hinge_scene):
        doc = io.read_json(hinge_scene / "truth.json", "truth")
        assert len(doc["labels0"]) == 450 and sum(doc["labels0"]) == 150

    def test_bad_arguments_exit_input(self, tmp_path):
        assert main(["synth", "--archetype", "lamp", "--out", str(tmp_path)]) == EXIT_INPUT
        assert main(["synth", "--archetype", "hinge", "--n-mobile", "1", "--out", str(tmp_path / "x")]) == EXIT_INPUT


class TestFit:
    def test_exit_and_outputs(self, hinge_fit):
        out, code = hinge_fit
        doc = io.read_json(out / "result.json", "result")
        assert code == (EXIT_FAILURE if doc["failed"] else code)
        assert code in (EXIT_OK, EXIT_FAILURE)
        ply = io.read_ply(out / "state0.ply")
        assert ply.mobility is not None and len(ply.gaussians) == 450
        assert set(json.loads((out / "timing.json").read_text())) == {"2a", "3a", "3c"}

    def test_recovers_small_hinge(self, hinge_fit):
        assert hinge_fit[1] == EXIT_OK

    def test_byte_identical_repeat(self, hinge_scene, hinge_fit, tmp_path):
        out, _ = hinge_fit
        assert main(["fit", str(hinge_scene), "--out", str(tmp_path), "--seed", "3", *FAST]) in (EXIT_OK, EXIT_FAILURE)
        for name in ("result.json", "state0.ply", "state1.ply"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()

    def test_missing_scene(self, tmp_path):
        assert main(["fit", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == EXIT_INPUT

    def test_malformed_ply(self, hinge_scene, tmp_path):
        bad = tmp_path / "bad"
        shutil.copytree(hinge_scene, bad)
        (bad / "state1.ply").write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
        assert main(["fit", str(bad), "--out", str(tmp_path / "o")]) == EXIT_INPUT

    def test_unknown_kind(self, hinge_scene, tmp_path):
        bare = tmp_path / "bare"
        bare.mkdir()
        for name in ("state0.ply", "state1.ply"):
            shutil.copy(hinge_scene / name, bare / name)
        assert main(["fit", str(bare), "--out", str(tmp_path / "o")]) == EXIT_INPUT

    def test_bad_config(self, hinge_scene, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[pipeline]\nk_mobile = 0\n")
        assert main(["fit", str(hinge_scene), "--out", str(tmp_path / "o"), "--config", str(cfg)]) == EXIT_INPUT


class TestEval:
    def test_metrics(self, hinge_scene, hinge_fit, tmp_path):
        out, code = hinge_fit
        assert main(["eval", str(out), str(hinge_scene), "--out", str(tmp_path), "--samples", "500"]) == EXIT_OK
        m = json.loads((tmp_path / "metrics.json").read_text())
        assert m["success"] == (code == EXIT_OK)
        for l in (0, 1):
            assert 0.5 <= m[f"state{l}"]["label_accuracy"] <= 1.0
            assert m[f"state{l}"]["cd_w"] >= 0
        assert (tmp_path / "table.txt").read_text().strip()

    def test_truth_file_accepted(self, hinge_scene, hinge_fit, tmp_path):
        out, _ = hinge_fit
        assert main(["eval", str(out), str(hinge_scene / "truth.json"), "--out", str(tmp_path),
                     "--samples", "200"]) == EXIT_OK

    def test_missing_truth(self, hinge_fit, tmp_path):
        assert main(["eval", str(hinge_fit[0]), str(tmp_path / "none"), "--out", str(tmp_path)]) == EXIT_INPUT


class TestRender:
    def test_outputs(self, hinge_scene, hinge_fit, tmp_path):
        out, _ = hinge_fit
        code = main(["render", str(out), "--out", str(tmp_path), "--cameras", str(hinge_scene / "cameras.json"),
                     "--t", "0,1", "--binarize"])
        assert code == EXIT_OK
        meta = json.loads((tmp_path / "renders.json").read_text())
        assert meta["t"] == [0.0, 1.0] and meta["cameras"] == [0, 1]
        for c in (0, 1):
            for t in (0, 1):
                for suffix in ("color.png", "seg.png", "depth.dpth"):
                    assert (tmp_path / f"cam{c:02d}_t{t:02d}_{suffix}").stat().st_size > 0

    def test_t_out_of_range(self, hinge_fit, tmp_path):
        assert main(["render", str(hinge_fit[0]), "--out", str(tmp_path), "--t", "1.5"]) == EXIT_INPUT


class TestSweep:
    def test_csv_rows(self, hinge_scene, hinge_fit, tmp_path):
        out, _ = hinge_fit
        assert main(["sweep", str(hinge_scene), "--n", "2", "--out", str(tmp_path), "--result", str(out)]) == EXIT_OK
        with open(tmp_path / "sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        assert sorted({r["formulation"] for r in rows}) == ["cross-mobile", "mobile-only"]
        assert all(np.isfinite(float(r["final_loss"])) for r in rows)
        summary = json.loads((tmp_path / "sweep.json").read_text())["summary"]
        assert set(summary) == {"mobile-only", "cross-mobile"}

    def test_needs_truth(self, hinge_scene, tmp_path):
        bare = tmp_path / "bare"
        bare.mkdir()
        for name in ("state0.ply", "state1.ply", "manifest.json"):
            shutil.copy(hinge_scene / name, bare / name)
        assert main(["sweep", str(bare), "--n", "1", "--out", str(tmp_path / "o")]) == EXIT_INPUT
