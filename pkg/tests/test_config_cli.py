import json

import numpy as np
import pytest

from augsplat.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from augsplat.config import PipelineConfig, load_config, parse_config_text
from augsplat.errors import ConfigError
from augsplat.primitives import GaussianCloud
from augsplat.scene_io import load_image, load_scene, save_scene
from augsplat.synthetic import SyntheticSpec, generate_synthetic

FAST = ["--set", "finetune_steps=40", "--set", "growth_interval=20", "--set", "joint_multiplier=2",
        "--set", "sh_order=0"]


def test_defaults_and_parsing(tmp_path):
    cfg = PipelineConfig()
    assert (cfg.ratio, cfg.growth_interval, cfg.prune_pixels, cfg.lobe_c) == (0.1, 200, 25, 7.0)
    assert parse_config_text("# comment\nratio = 0.05  # inline\n\nlobes=false\n") == {"ratio": "0.05",
                                                                                      "lobes": "false"}
    (tmp_path / "c.cfg").write_text("ratio = 0.15\nseed = 4\n")
    cfg = load_config(tmp_path / "c.cfg", {"seed": "9"})
    assert cfg.ratio == 0.15 and cfg.seed == 9
    assert cfg.plan().iterations_per_view == 30 and cfg.densify().interval == 200


@pytest.mark.parametrize("text", ["ratio = 1.5", "bogus = 1", "finetune_steps = -2", "seed = x", "ratio"])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides(parse_config_text(text))


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    spec = dict(n_cameras=6, width=24, height=18, grid=6, n_specular=2, test_every=3)
    (root / "spec.json").write_text(json.dumps(spec))
    assert main(["gen-synthetic", str(root / "spec.json"), str(root / "data"), "--seed", "1"]) == EXIT_OK
    sc = generate_synthetic(SyntheticSpec(**spec), 1)
    save_scene(sc.diffuse, root / "diffuse.ply")
    return root, sc


def test_gen_synthetic_reproducible(toy, tmp_path):
    root, _ = toy
    assert main(["gen-synthetic", str(root / "spec.json"), str(tmp_path / "again"), "--seed", "1"]) == EXIT_OK
    for name in ("cameras.json", "images/view_000.png", "ground_truth.ply"):
        assert (root / "data" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_gen_synthetic_zero_cameras_is_usage_error(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"n_cameras": 0}))
    assert main(["gen-synthetic", str(tmp_path / "bad.json"), str(tmp_path / "out")]) == EXIT_USAGE


def test_usage_and_data_errors(toy, tmp_path):
    root, _ = toy
    assert main([]) == EXIT_USAGE
    assert main(["render"]) == EXIT_USAGE
    assert main(["eval", str(tmp_path / "missing.ply"), str(root / "data")]) == EXIT_DATA
    (tmp_path / "empty").mkdir()
    (tmp_path / "empty" / "cameras.json").write_text("[]")
    assert main(["train-base", str(tmp_path / "empty"), str(tmp_path / "x.ply")]) == EXIT_USAGE
    assert main(["enhance", str(root / "diffuse.ply"), str(root / "data"), str(tmp_path / "o.ply"),
                 "--set", "ratio=3"]) == EXIT_USAGE


def test_train_base_writes_scene_and_metrics(toy, tmp_path):
    root, _ = toy
    out = tmp_path / "base.ply"
    assert main(["train-base", str(root / "data"), str(out), "--count", "10", "--iterations", "20",
                 "--set", "sh_order=1"]) == EXIT_OK
    assert len(load_scene(out)) == 10
    metrics = json.loads(out.with_suffix(".metrics.json").read_text())
    assert all(np.isfinite(m["psnr"]) for m in metrics["metrics"])


def test_eval_self_render_hits_cap(toy, tmp_path):
    root, _ = toy
    assert main(["eval", str(root / "data" / "ground_truth.ply"), str(root / "data"), "--split", "all",
                 "--out", str(tmp_path / "e.json")]) == EXIT_OK
    report = json.loads((tmp_path / "e.json").read_text())
    # targets went through 8-bit PNG, so the cap is only reached up to quantisation
    assert report["mean_psnr"] > 55.0


def test_render_empty_scene_is_background(toy, tmp_path):
    root, _ = toy
    save_scene(GaussianCloud.empty(0), tmp_path / "empty.ply")
    assert main(["render", str(tmp_path / "empty.ply"), str(root / "data" / "cameras.json"), str(tmp_path / "r"),
                 "--background", "0.2,0.4,0.6"]) == EXIT_OK
    img = load_image(tmp_path / "r" / "view_000.png")
    assert np.allclose(img, np.round(np.array([0.2, 0.4, 0.6]) * 255) / 255)


def test_decompose_without_additions_is_black(toy, tmp_path):
    root, _ = toy
    assert main(["decompose", str(root / "diffuse.ply"), str(root / "data" / "cameras.json"),
                 str(tmp_path / "d")]) == EXIT_OK
    assert np.all(load_image(tmp_path / "d" / "view_000_specular.png") == 0)
    assert load_image(tmp_path / "d" / "view_000_diffuse.png").max() > 0


def test_enhance_ratio_zero_returns_input(toy, tmp_path):
    root, _ = toy
    out = tmp_path / "aug.ply"
    assert main(["enhance", str(root / "diffuse.ply"), str(root / "data"), str(out), "--ratio", "0",
                 "--workers", "1"] + FAST) == EXIT_OK
    src, got = load_scene(root / "diffuse.ply"), load_scene(out)
    for f in ("positions", "quats", "log_scales", "sh"):
        assert np.array_equal(getattr(src, f), getattr(got, f))


def test_enhance_deterministic_with_report(toy, tmp_path):
    root, _ = toy
    outs = []
    for k in range(2):
        out = tmp_path / f"aug{k}.ply"
        assert main(["enhance", str(root / "diffuse.ply"), str(root / "data"), str(out), "--workers", "1",
                     "--seed", "3"] + FAST) == EXIT_OK
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    report = json.loads(outs[0].with_suffix(".report.json").read_text())
    for key in ("budgets", "lifted", "dropped_empty_footprint", "dropped_clustering", "fit_2d_seconds"):
        assert key in report
    assert report["added_count"] > 0
    added = load_scene(tmp_path / "aug0.added.ply")
    assert len(added) == report["added_count"] and added.has_lobe.all()
    assert len(load_scene(outs[0])) == len(load_scene(root / "diffuse.ply")) + len(added)
