"""Command-line surface: end-to-end flows, exit codes, byte determinism,
config layering, and partial-output cleanup."""

import json
from pathlib import Path

import numpy as np
import pytest

from recistkit.cli import main
from recistkit.dataio import read_detections, read_heatmaps


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture()
def sim_dir(tmp_path):
    out = tmp_path / "sim"
    assert run("simulate", "--out", out, "--scene-seed", 11, "--n-lesions", 3) == 0
    return out


class TestSimulate:
    def test_outputs(self, sim_dir):
        assert (sim_dir / "syn_11.rkhm").exists()
        assert (sim_dir / "annotations.csv").exists()
        config = json.loads((sim_dir / "config.json").read_text())
        assert config["simulate"]["scene_seed"] == 11
        bundle = read_heatmaps(sim_dir / "syn_11.rkhm")
        assert bundle.stride == 4

    def test_byte_determinism_across_runs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("simulate", "--out", out, "--scene-seed", 3,
                       "--n-lesions", 2, "--noise", 0.05) == 0
        for name in ("syn_3.rkhm", "annotations.csv", "config.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_flipped_output(self, tmp_path):
        out, flipped = tmp_path / "o", tmp_path / "f"
        assert run("simulate", "--out", out, "--flipped-out", flipped,
                   "--scene-seed", 4, "--n-lesions", 2) == 0
        assert (flipped / "syn_4.rkhm").exists()


class TestDetectEvalFlow:
    def test_zero_noise_round_trip_perfect_sensitivity(self, sim_dir, tmp_path):
        dets_path = tmp_path / "dets.json"
        assert run("detect", "--heatmaps", sim_dir, "--out", dets_path) == 0
        report = tmp_path / "report"
        assert run("eval", "--detections", dets_path,
                   "--annotations", sim_dir / "annotations.csv",
                   "--out", report) == 0
        doc = json.loads((report.with_suffix(".json")).read_text())
        points = doc["froc"]["points"]
        assert [p["fp_target"] for p in points] == [0.5, 1.0, 2.0, 3.0, 4.0]
        assert all(p["sensitivity"] == 1.0 for p in points)
        assert points[0]["fp_per_image"] == 0.0
        assert (report.with_suffix(".txt")).exists()

    def test_detect_workers_byte_identical(self, sim_dir, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert run("detect", "--heatmaps", sim_dir, "--workers", 1, "--out", a) == 0
        assert run("detect", "--heatmaps", sim_dir, "--workers", 4, "--out", b) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_detect_flag_overrides_config_file(self, sim_dir, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"grouping": {"tau_c": 0.9}}))
        out = tmp_path / "d.json"
        assert run("detect", "--heatmaps", sim_dir, "--config", cfg_file,
                   "--tau-c", 0.05, "--out", out) == 0
        _, config = read_detections(out)
        assert config["grouping"]["tau_c"] == 0.05

    def test_eval_empty_detections_zero_sensitivity(self, sim_dir, tmp_path):
        dets_path = tmp_path / "none.json"
        dets_path.write_text(json.dumps({"config": None, "images": {}}))
        report = tmp_path / "r"
        assert run("eval", "--detections", dets_path,
                   "--annotations", sim_dir / "annotations.csv",
                   "--out", report) == 0
        doc = json.loads(report.with_suffix(".json").read_text())
        assert all(p["sensitivity"] == 0.0 for p in doc["froc"]["points"])

    def test_eval_stratified(self, sim_dir, tmp_path):
        dets_path = tmp_path / "dets.json"
        run("detect", "--heatmaps", sim_dir, "--out", dets_path)
        report = tmp_path / "r"
        assert run("eval", "--detections", dets_path,
                   "--annotations", sim_dir / "annotations.csv",
                   "--stratify", "type", "--out", report) == 0
        doc = json.loads(report.with_suffix(".json").read_text())
        assert doc["strata"]["key"] == "type"
        assert len(doc["strata"]["per_stratum"]) >= 1


class TestFuseFlow:
    def test_tta_round_trip(self, tmp_path):
        sim, flip = tmp_path / "s", tmp_path / "f"
        run("simulate", "--out", sim, "--flipped-out", flip,
            "--scene-seed", 21, "--n-lesions", 2)
        d_orig, d_flip = tmp_path / "o.json", tmp_path / "fl.json"
        run("detect", "--heatmaps", sim, "--out", d_orig)
        run("detect", "--heatmaps", flip, "--out", d_flip)
        fused = tmp_path / "fused.json"
        assert run("fuse", "--original", d_orig, "--flipped", d_flip,
                   "--image-width", 768, "--out", fused) == 0
        report = tmp_path / "r"
        assert run("eval", "--detections", fused,
                   "--annotations", sim / "annotations.csv",
                   "--out", report) == 0
        doc = json.loads(report.with_suffix(".json").read_text())
        assert doc["froc"]["points"][0]["sensitivity"] == 1.0


class TestRenderTargets:
    def test_renders_per_image_key(self, sim_dir, tmp_path):
        out = tmp_path / "rendered"
        assert run("render-targets", "--annotations", sim_dir / "annotations.csv",
                   "--input-size", 768, "--out", out) == 0
        files = sorted(out.glob("*.rkhm"))
        assert [f.stem for f in files] == ["syn_11"]
        bundle = read_heatmaps(files[0])
        assert bundle.grid_shape == (192, 192)
        assert bundle.input_size == (768, 768)
        assert (out / "config.json").exists()

    def test_default_input_size_511_gives_128_cells(self, tmp_path):
        from recistkit.dataio import write_annotations
        from recistkit.synthetic import generate_scene

        scene = generate_scene(1, image_size=(511, 511), seed=30)
        csv = tmp_path / "a.csv"
        write_annotations(scene.annotations, csv)
        out = tmp_path / "rendered"
        assert run("render-targets", "--annotations", csv, "--out", out) == 0
        bundle = read_heatmaps(next(out.glob("*.rkhm")))
        assert bundle.grid_shape == (128, 128)

    def test_oversized_coordinates_exit_3(self, sim_dir, tmp_path):
        out = tmp_path / "rendered"
        code = run("render-targets", "--annotations", sim_dir / "annotations.csv",
                   "--input-size", 64, "--out", out)
        assert code == 3
        assert not list(out.glob("*.rkhm"))  # partial outputs removed


class TestErrorPaths:
    def test_unknown_flag_usage_error(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["detect", "--no-such-flag", "x"])
        assert excinfo.value.code == 2

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["frobnicate"])
        assert excinfo.value.code == 2

    def test_missing_heatmap_dir_exit_3(self, tmp_path):
        assert run("detect", "--heatmaps", tmp_path / "nope",
                   "--out", tmp_path / "d.json") == 3

    def test_corrupt_heatmap_exit_3_no_partial_output(self, tmp_path):
        bad_dir = tmp_path / "bundles"
        bad_dir.mkdir()
        (bad_dir / "x.rkhm").write_bytes(b"garbage")
        out = tmp_path / "d.json"
        assert run("detect", "--heatmaps", bad_dir, "--out", out) == 3
        assert not out.exists()

    def test_unknown_config_key_exit_3(self, tmp_path, sim_dir):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"groupings": {}}))
        assert run("detect", "--heatmaps", sim_dir, "--config", cfg,
                   "--out", tmp_path / "d.json") == 3

    def test_malformed_csv_exit_3(self, tmp_path):
        csv = tmp_path / "bad.csv"
        csv.write_text("File_name\nonly-one-column\n")
        assert run("eval", "--detections", tmp_path / "missing.json",
                   "--annotations", csv, "--out", tmp_path / "r") == 3


class TestWindow:
    def test_round_trip_values(self, tmp_path):
        raw = tmp_path / "raw.f32"
        data = np.array([-150.0, 50.0, 250.0, -1000.0, 3000.0], dtype="<f4")
        raw.write_bytes(data.tobytes())
        out = tmp_path / "norm.f32"
        assert run("window", "--level", 50, "--width", 400,
                   "--in", raw, "--out", out) == 0
        normalized = np.frombuffer(out.read_bytes(), dtype="<f4")
        assert list(normalized) == [0.0, 0.5, 1.0, 0.0, 1.0]

    def test_nonpositive_width_usage_error(self, tmp_path):
        raw = tmp_path / "raw.f32"
        raw.write_bytes(np.zeros(4, dtype="<f4").tobytes())
        with pytest.raises(SystemExit) as excinfo:
            main(["window", "--level", "50", "--width", "0",
                  "--in", str(raw), "--out", str(tmp_path / "o.f32")])
        assert excinfo.value.code == 2


class TestCheckGradients:
    def test_passes_with_default_settings(self, capsys):
        assert run("check-gradients", "--trials", 5) == 0
        out = capsys.readouterr().out
        assert "PASS" in out


class TestHelp:
    def test_help_lists_flag_defaults(self, capsys):
        from recistkit.cli import build_parser

        parser = build_parser()
        cases = {
            "detect": ["(default: 0.1)", "(default: 40)", "(default: 100)",
                       "(default: nearest)"],
            "render-targets": ["(default: 511)", "(default: 4)", "(default: 0.3)"],
            "eval": ["(default: 0.5)", "(default: 5)", "0.5,1,2,3,4"],
            "fuse": ["(default: 0.5)", "(default: 0.001)", "(default: gaussian)"],
        }
        for command, expected in cases.items():
            with pytest.raises(SystemExit) as excinfo:
                parser.parse_args([command, "--help"])
            assert excinfo.value.code == 0
            text = capsys.readouterr().out
            for fragment in expected:
                assert fragment in text, (command, fragment)
