import json

import numpy as np
import pytest
from click.testing import CliRunner

from boostdream.cli import main
from boostdream.config import parse_config
from boostdream.errors import ConfigError
from boostdream.field import init_field, save_field
from boostdream.mesh import make_cube, save_obj

from conftest import FACE_COLORS


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def cube_path(tmp_path):
    path = tmp_path / "cube.obj"
    save_obj(make_cube(FACE_COLORS), path)
    return str(path)


class TestParseConfig:
    def test_defaults_match_stage_schedule(self):
        cfg = parse_config()
        assert (cfg.distill_iters, cfg.boost_iters, cfg.self_boost_iters) == (200, 1800, 3000)
        assert cfg.diffusion_steps == 1000
        assert cfg.cfg_scale == 7.5

    def test_flag_overrides_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"boost_iters": 1800, "seed": 5}))
        cfg = parse_config(path, {"boost_iters": 10})
        assert cfg.boost_iters == 10
        assert cfg.seed == 5

    def test_unknown_key_named(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"booost_iters": 10}))
        with pytest.raises(ConfigError, match="booost_iters"):
            parse_config(path)

    def test_type_mismatch(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"distill_iters": 2.5}))
        with pytest.raises(ConfigError, match="distill_iters"):
            parse_config(path)

    def test_constraint_violation_names_key(self):
        with pytest.raises(ConfigError, match="per_view_size"):
            parse_config(None, {"per_view_size": 7})

    def test_target_dir_forces_fixed_rig(self, tmp_path):
        cfg = parse_config(None, {"target_dir": str(tmp_path)})
        assert cfg.rig_mode == "fixed"

    def test_bad_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="JSON"):
            parse_config(path)


class TestTurntable:
    def test_empty_field_renders_background_frames(self, runner, tmp_path):
        field_path = tmp_path / "empty.bdf"
        save_field(init_field(8, seed=0, init_mode="empty"), field_path)
        out = tmp_path / "frames"
        result = runner.invoke(main, [
            "render-turntable", "--field", str(field_path), "--out", str(out),
            "--frames", "8", "--size", "16", "--n-samples", "8",
        ])
        assert result.exit_code == 0, result.output
        frames = sorted(out.glob("*.png"))
        assert len(frames) == 8
        from PIL import Image

        for frame in frames:
            arr = np.asarray(Image.open(frame))
            assert (arr == 255).all()

    def test_missing_field_is_error(self, runner, tmp_path):
        result = runner.invoke(main, [
            "render-turntable", "--field", str(tmp_path / "nope.bdf"),
            "--out", str(tmp_path / "o"),
        ])
        assert result.exit_code == 1


class TestEvalMetrics:
    def test_identical_sets_inf_psnr(self, runner, tmp_path):
        field_path = tmp_path / "f.bdf"
        save_field(init_field(8, seed=3), field_path)
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            r = runner.invoke(main, [
                "render-turntable", "--field", str(field_path), "--out", str(out),
                "--frames", "3", "--size", "16", "--n-samples", "8",
            ])
            assert r.exit_code == 0
        result = runner.invoke(main, [
            "eval-metrics", "--renders-dir", str(a), "--ref-dir", str(b),
        ])
        assert result.exit_code == 0, result.output
        report = json.loads(result.output)
        assert report["psnr"] == "inf"
        assert report["l1"] == 0.0

    def test_field_vs_own_turntable(self, runner, tmp_path):
        field_path = tmp_path / "f.bdf"
        save_field(init_field(8, seed=4), field_path)
        ref = tmp_path / "ref"
        r = runner.invoke(main, [
            "render-turntable", "--field", str(field_path), "--out", str(ref),
            "--frames", "2", "--size", "16", "--n-samples", "8",
        ])
        assert r.exit_code == 0
        result = runner.invoke(main, [
            "eval-metrics", "--field", str(field_path), "--ref-dir", str(ref),
            "--frames", "2", "--size", "16", "--n-samples", "8",
        ])
        assert result.exit_code == 0, result.output
        report = json.loads(result.output)
        assert report["psnr"] == "inf"

    def test_requires_exactly_one_source(self, runner, tmp_path):
        (tmp_path / "x.png").write_bytes(b"")
        result = runner.invoke(main, ["eval-metrics", "--ref-dir", str(tmp_path)])
        assert result.exit_code == 2


class TestRefineAndDistill:
    def test_distill_command(self, runner, tmp_path, cube_path):
        out = tmp_path / "run"
        result = runner.invoke(main, [
            "distill", "--mesh", cube_path, "--out", str(out), "--seed", "1",
            "--distill-iters", "3", "--resolution", "10",
            "--per-view-size", "16", "--n-samples", "8",
        ])
        assert result.exit_code == 0, result.output
        assert (out / "field_distilled.bdf").exists()

    def test_refine_offline_with_target_dir(self, runner, tmp_path, cube_path):
        # build 4 target views from a reference field, then refine offline
        ref_field = tmp_path / "ref.bdf"
        save_field(init_field(10, seed=9), ref_field)
        targets = tmp_path / "targets"
        r = runner.invoke(main, [
            "render-turntable", "--field", str(ref_field), "--out", str(targets),
            "--frames", "4", "--size", "16", "--n-samples", "8",
        ])
        assert r.exit_code == 0
        out = tmp_path / "run"
        result = runner.invoke(main, [
            "refine", "--mesh", cube_path, "--backend", "analytic",
            "--target-dir", str(targets), "--out", str(out), "--seed", "2",
            "--distill-iters", "2", "--boost-iters", "2", "--self-boost-iters", "2",
            "--resolution", "10", "--per-view-size", "16", "--n-samples", "8",
        ])
        assert result.exit_code == 0, result.output
        lines = (out / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 6

    def test_refine_missing_mesh_is_config_error(self, runner, tmp_path):
        result = runner.invoke(main, ["refine", "--out", str(tmp_path / "x")])
        assert result.exit_code == 2
        assert "mesh" in result.output

    def test_unknown_config_key_exit_code(self, runner, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"booost_iters": 1}))
        result = runner.invoke(main, ["refine", "--config", str(path)])
        assert result.exit_code == 2
        assert "booost_iters" in result.output

    def test_ablation_flags(self, runner, tmp_path, cube_path):
        ref_field = tmp_path / "ref.bdf"
        save_field(init_field(10, seed=9), ref_field)
        out = tmp_path / "run"
        result = runner.invoke(main, [
            "refine", "--mesh", cube_path, "--skip-boost", "--skip-self-boost",
            "--out", str(out), "--distill-iters", "2", "--resolution", "10",
            "--per-view-size", "16", "--n-samples", "8",
        ])
        assert result.exit_code == 0, result.output
        assert len((out / "metrics.jsonl").read_text().splitlines()) == 2
