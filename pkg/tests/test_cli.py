import json

import numpy as np
import pytest
from click.testing import CliRunner

from protoscene.cli import main
from protoscene.io import (ObjectArchetype, SynthSpec, load_scene,
                           save_synth_spec, save_train_config)
from protoscene.losses import LossWeights
from protoscene.model import ModelConfig
from protoscene.training import ConvergenceConfig, TrainConfig


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def spec_path(tmp_path):
    spec = SynthSpec(
        extent_m=48.0, ground_density=3.0, seed=0,
        objects=[ObjectArchetype(shape="cone", count=(6, 6), scale=(2.0, 3.0),
                                 intensity=0.7, class_id=1, points=300)])
    path = tmp_path / "spec.toml"
    save_synth_spec(path, spec)
    return path


@pytest.fixture
def config_path(tmp_path):
    # smallest possible run: 1 epoch per stage, tiny encoder
    cfg = TrainConfig(
        patch_size_m=16.0, batch_size=2, batches_per_epoch=2,
        max_points_per_patch=300, warmup_batches=4,
        convergence=ConvergenceConfig(max_epochs_per_stage=1),
        weights=LossWeights(),
        model=ModelConfig(num_slots=2, num_prototypes=2,
                          points_per_prototype=16, grid_resolution=4,
                          voxel_size_m=4.0))
    path = tmp_path / "train.toml"
    save_train_config(path, cfg)
    return path


def test_synth_command(runner, spec_path, tmp_path):
    out = tmp_path / "scene.ply"
    result = runner.invoke(main, ["synth", "--spec", str(spec_path),
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    scene = load_scene(out)
    assert len(scene) > 5000
    assert set(np.unique(scene.class_label)) == {0, 1}


def test_missing_spec_is_user_error(runner, tmp_path):
    result = runner.invoke(main, ["synth", "--spec", str(tmp_path / "nope.toml"),
                                  "--out", str(tmp_path / "s.ply")])
    assert result.exit_code != 0


def test_malformed_scene_is_user_error(runner, tmp_path):
    bad = tmp_path / "bad.ply"
    bad.write_text("not a ply\n")
    result = runner.invoke(main, ["baseline-kmeans", "--scene", str(bad)])
    assert result.exit_code == 1


@pytest.mark.slow
def test_full_pipeline(runner, spec_path, config_path, tmp_path):
    scene_path = tmp_path / "scene.ply"
    run_dir = tmp_path / "run"
    eval_dir = tmp_path / "eval"
    dec_dir = tmp_path / "dec"

    r = runner.invoke(main, ["synth", "--spec", str(spec_path),
                             "--out", str(scene_path)])
    assert r.exit_code == 0, r.output

    r = runner.invoke(main, ["train", "--scene", str(scene_path),
                             "--config", str(config_path),
                             "--out", str(run_dir)])
    assert r.exit_code == 0, r.output
    assert (run_dir / "metrics.jsonl").exists()
    assert (run_dir / "loss_curves.png").exists()
    assert (run_dir / "ckpt_stage5_final").exists()

    r = runner.invoke(main, ["evaluate", "--run", str(run_dir),
                             "--scene", str(scene_path),
                             "--out", str(eval_dir)])
    assert r.exit_code == 0, r.output
    report = json.loads((eval_dir / "report.json").read_text())
    assert {"chamfer_sym", "miou", "per_class_iou",
            "instance_counts", "selection_report"} <= set(report)
    assert (eval_dir / "report.csv").exists()
    assert (eval_dir / "class_iou.png").exists()
    assert (eval_dir / "prototypes.png").exists()
    # the stdout line is machine-readable
    tail = json.loads(r.output.strip().splitlines()[-1])
    assert tail["miou"] == report["miou"]

    r = runner.invoke(main, ["decompose", "--run", str(run_dir),
                             "--scene", str(scene_path),
                             "--out", str(dec_dir)])
    assert r.exit_code == 0, r.output
    for name in ("semantic.ply", "instance.ply", "prototypes.ply",
                 "report.json", "prototypes.png"):
        assert (dec_dir / name).exists(), name

    r = runner.invoke(main, ["select-prototypes", "--run", str(run_dir),
                             "--scene", str(scene_path)])
    assert r.exit_code == 0, r.output
    sel = json.loads(r.output)
    assert set(sel) == {"kept", "steps"}

    r = runner.invoke(main, ["export", "--run", str(run_dir),
                             "--out", str(tmp_path / "protos.ply")])
    assert r.exit_code == 0, r.output
    assert (tmp_path / "protos.ply").exists()


def test_baseline_kmeans_outputs(runner, spec_path, tmp_path):
    scene_path = tmp_path / "scene.ply"
    runner.invoke(main, ["synth", "--spec", str(spec_path),
                         "--out", str(scene_path)])
    out_dir = tmp_path / "km"
    r = runner.invoke(main, ["--seed", "0", "baseline-kmeans",
                             "--scene", str(scene_path), "-k", "2",
                             "--out", str(out_dir)])
    assert r.exit_code == 0, r.output
    result = json.loads(r.output.strip().splitlines()[-1])
    assert 0.0 <= result["miou"] <= 100.0
    assert (out_dir / "report.csv").exists()
    assert (out_dir / "class_iou.png").exists()
    assert (out_dir / "clusters.png").exists()


def test_unknown_feature_is_user_error(runner, spec_path, tmp_path):
    scene_path = tmp_path / "scene.ply"
    runner.invoke(main, ["synth", "--spec", str(spec_path),
                         "--out", str(scene_path)])
    r = runner.invoke(main, ["baseline-kmeans", "--scene", str(scene_path),
                             "--features", "bogus"])
    assert r.exit_code == 1
