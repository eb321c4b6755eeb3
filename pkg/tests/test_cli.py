import json

import numpy as np
import pytest

from polarsplat import cli, core, fileio, fusion, pipeline
from polarsplat.config import PipelineConfig, load_config, parse_override, with_section
from polarsplat.errors import ConfigError


def _small(tmp_path, *extra):
    return ["--output", str(tmp_path), "--set", "cameras.n_views=4", "--set", "cameras.width=32",
            "--set", "cameras.height=32", *extra]


def test_defaults_round_trip_through_dict():
    cfg = PipelineConfig(output_dir="x")
    again = PipelineConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"fusion": {"voxel": 0.01}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"scene": {"radius": 1, "colour": 2}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"fusion": 3})


def test_overrides_parse_json_and_strings():
    assert parse_override("a.b=0.5") == (["a", "b"], 0.5)
    assert parse_override("a=[1, 2]") == (["a"], [1, 2])
    assert parse_override("scene.shape=plane") == (["scene", "shape"], "plane")
    with pytest.raises(ConfigError):
        parse_override("novalue")
    cfg = load_config(None, ["patchmatch.lambda1=0", "scene.shape=plane", "seed=3"])
    assert cfg.patchmatch.lambda1 == 0 and cfg.scene.shape == "plane" and cfg.seed == 3
    # partial scene sections keep the default highlight scene
    assert cfg.scene.specular_strength == 0.5


def test_config_file_and_flags(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"fusion": {"voxel_size": 0.01}, "seed": 1}))
    cfg = load_config(str(p), ["fusion.truncation=0.05"], seed=7, threads=1)
    assert cfg.fusion.voxel_size == 0.01 and cfg.fusion.truncation == 0.05
    assert cfg.seed == 7 and cfg.threads == 1
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "bad.json"))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))


def test_section_validation():
    with pytest.raises(ConfigError):
        load_config(None, ["cameras.n_views=5"])
    with pytest.raises(ConfigError):
        load_config(None, ["fusion.truncation=0.001"])
    with pytest.raises(ConfigError):
        load_config(None, ["init.cloud=/no/such/file.ply"])
    cfg = with_section(PipelineConfig(output_dir="x"), "fusion", voxel_size=0.02)
    assert cfg.fusion.voxel_size == 0.02


def test_output_dir_from_environment(monkeypatch):
    monkeypatch.setenv("POLARSPLAT_OUTPUT", "/tmp/somewhere")
    assert PipelineConfig().output_dir == "/tmp/somewhere"


def test_usage_errors_exit_1(tmp_path, capsys):
    assert cli.main(["nonsense"]) == cli.EXIT_USAGE
    assert cli.main(["synth", "--set", "bogus.key=1", "--output", str(tmp_path)]) == cli.EXIT_USAGE
    assert cli.main(["synth", "--set", "input_dir=/no/such/dir", "--output", str(tmp_path)]) == 1
    assert cli.main(["--help"]) == cli.EXIT_OK


def test_missing_inputs_exit_2(tmp_path):
    assert cli.main(["preprocess", "--output", str(tmp_path)]) == cli.EXIT_DATA
    assert cli.main(["eval", "--output", str(tmp_path)]) == cli.EXIT_DATA


def test_synth_writes_expected_files(tmp_path):
    assert cli.main(_small(tmp_path) + ["synth"]) == 0
    files = sorted(p.name for p in (tmp_path / "dataset").iterdir())
    assert len(files) == 4 * 8 + 1
    assert "manifest.json" in files
    man = json.loads((tmp_path / "dataset" / "manifest.json").read_text())
    assert man["views"] == [f"view_{i:03d}" for i in range(4)]
    assert json.loads((tmp_path / "timings.json").read_text())["synth"] >= 0


def test_preprocess_round_trip(tmp_path):
    assert cli.main(_small(tmp_path) + ["synth"]) == 0
    assert cli.main(_small(tmp_path) + ["preprocess"]) == 0
    cfg = load_config(None, [f"output_dir={tmp_path}", "cameras.n_views=4"])
    man = pipeline.load_manifest(cfg)
    cap = pipeline.load_capture(cfg, man, 2)
    st = core.stokes_from_angles(cap)
    st2, pol2, inten2 = pipeline.load_preprocessed(cfg, 2)
    np.testing.assert_allclose(st2.s0, st.s0, atol=1e-6)
    np.testing.assert_allclose(st2.s1, st.s1, atol=1e-6)
    pol = core.aolp_dolp(st)
    np.testing.assert_allclose(fileio.read_pfm(tmp_path / "preprocess" / "view_002_dolp.pfm"),
                               pol.dolp, atol=1e-6)
    assert (tmp_path / "preprocess" / "init_cloud.ply").exists()


def test_correct_without_highlights_leaves_cloud_unchanged(tmp_path):
    args = _small(tmp_path, "--set", "scene.specular_strength=0", "--set", "scene.albedo=[0.3, 0.25, 0.2]")
    assert cli.main(args + ["synth"]) == 0
    assert cli.main(args + ["preprocess"]) == 0
    assert cli.main(args + ["correct"]) == 0
    summary = json.loads((tmp_path / "correct" / "correct.json").read_text())
    assert summary["reflective_pixels"] == 0
    a = (tmp_path / "preprocess" / "init_cloud.ply").read_bytes()
    b = (tmp_path / "correct" / "cloud.ply").read_bytes()
    assert a == b


def test_eval_identical_meshes_and_missing_gt(tmp_path):
    vol = fusion.TsdfVolume.from_bounds([-0.5] * 3, [0.5] * 3, 0.05, 0.1)
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in vol.dims], indexing="ij"), axis=-1)
    vol.tsdf[:] = np.clip((np.linalg.norm(vol.world_coords(idx), axis=-1) - 0.4) / 0.1, -1, 1)
    vol.weight[:] = 1
    mesh_path = tmp_path / "m.ply"
    fusion.save_mesh(mesh_path, fusion.extract_mesh(vol))
    args = ["eval", "--output", str(tmp_path), "--mesh", str(mesh_path)]
    assert cli.main(args + ["--gt", str(mesh_path)]) == cli.EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["cd"] == 0.0 and report["pass"]
    assert report["mae_deg"] == pytest.approx(0.0, abs=1e-5)
    assert "output_dir" not in report["config"]
    assert cli.main(args + ["--gt", str(tmp_path / "nope.ply")]) == cli.EXIT_USAGE
    assert cli.main(args) == cli.EXIT_USAGE


def test_eval_below_threshold_exits_4(tmp_path):
    vol = fusion.TsdfVolume.from_bounds([-0.5] * 3, [0.5] * 3, 0.05, 0.1)
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in vol.dims], indexing="ij"), axis=-1)
    r = np.linalg.norm(vol.world_coords(idx), axis=-1)
    vol.weight[:] = 1
    vol.tsdf[:] = np.clip((r - 0.4) / 0.1, -1, 1)
    fusion.save_mesh(tmp_path / "a.ply", fusion.extract_mesh(vol))
    vol.tsdf[:] = np.clip((r - 0.3) / 0.1, -1, 1)
    fusion.save_mesh(tmp_path / "b.ply", fusion.extract_mesh(vol))
    code = cli.main(["eval", "--output", str(tmp_path), "--mesh", str(tmp_path / "b.ply"),
                     "--gt", str(tmp_path / "a.ply")])
    assert code == cli.EXIT_EVAL_FAILED
    assert not json.loads((tmp_path / "report.json").read_text())["pass"]
