"""Command-line surface.

Subcommands: synth, train, evaluate, decompose, select-prototypes,
baseline-kmeans, export. Exit codes: 0 success, 1 user error, 2 internal
error.
"""
from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import evaluation, figures, io, training


def _fail_user(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _apply_determinism(deterministic: bool, seed):
    import torch

    if seed is not None:
        torch.manual_seed(seed)
        np.random.seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


class _Cli(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.ClickException, click.Abort, click.exceptions.Exit):
            raise
        except (FileNotFoundError, ValueError) as exc:
            _fail_user(str(exc))
        except Exception as exc:  # internal error
            click.echo(f"internal error: {exc!r}", err=True)
            sys.exit(2)


@click.group(cls=_Cli)
@click.option("--seed", type=int, default=None, help="Global RNG seed.")
@click.option("--deterministic", is_flag=True, help="Deterministic kernels and reductions.")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Run configuration file (TOML).")
@click.pass_context
def main(ctx, seed, deterministic, config_path):
    """Decompose large point clouds into transformed learnable prototype shapes."""
    ctx.ensure_object(dict)
    ctx.obj.update(seed=seed, deterministic=deterministic, config=config_path)
    _apply_determinism(deterministic, seed)


def _load_config(ctx, explicit):
    path = explicit or ctx.obj.get("config")
    config = io.load_train_config(path) if path else training.TrainConfig()
    if ctx.obj.get("seed") is not None:
        config.seed = ctx.obj["seed"]
    if ctx.obj.get("deterministic"):
        config.deterministic = True
    return config


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
def synth(ctx, spec_path, out_path):
    """Generate a labeled synthetic scene from a spec file."""
    spec = io.load_synth_spec(spec_path)
    if ctx.obj.get("seed") is not None:
        spec.seed = ctx.obj["seed"]
    scene = io.generate_synthetic_scene(spec)
    io.save_scene(out_path, scene)
    click.echo(f"wrote {len(scene)} points to {out_path}")


@main.command()
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_context
def train(ctx, scene_path, config_path, out_dir):
    """Train the full curriculum on one scene."""
    config = _load_config(ctx, config_path)
    scene = io.load_scene(scene_path)
    training.train(scene, config, out_dir=out_dir)
    metrics = Path(out_dir) / "metrics.jsonl"
    if metrics.exists():
        figures.plot_loss_curves(metrics, Path(out_dir) / "loss_curves.png")
    click.echo(f"run complete: {out_dir}")


def _latest_checkpoint(run_dir: Path):
    candidates = sorted(run_dir.glob("ckpt_stage*_final"))
    if not candidates:
        candidates = sorted(run_dir.glob("ckpt_stage*"))
    if not candidates:
        raise FileNotFoundError(f"no checkpoints in {run_dir}")
    return candidates[-1]


def _write_report(out_dir: Path, report: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    flat = {k: v for k, v in report.items() if isinstance(v, (int, float, str))}
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(flat))
        writer.writerow([flat[k] for k in flat])


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.pass_context
def evaluate(ctx, run_dir, scene_path, out_dir):
    """Evaluate a trained run: Chamfer, mIoU, instance counts, selection."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "evaluation"
    ckpt = training.load_checkpoint(_latest_checkpoint(run_dir))
    model = ckpt["model"]
    scene = io.load_scene(scene_path)
    patch_size = ckpt["train_config"]["patch_size_m"]
    patches = evaluation.decompose_scene(model, scene, patch_size)
    labels = evaluation.label_prototypes(model, patches)
    pred = evaluation.semantic_segmentation(model, patches, labels)
    order = evaluation.scene_order_index(patches, scene)
    gt = scene.class_label[order]
    score, table = evaluation.miou(pred, gt)
    cham = evaluation.scene_chamfer(model, scene, patch_size)
    inst = evaluation.instance_segmentation(
        patches, set(range(model.config.num_prototypes)))
    selection = evaluation.select_prototypes(model, scene, patch_size)
    report = {
        "chamfer_sym": cham,
        "miou": score,
        "per_class_iou": {str(k): v for k, v in table.items()},
        "instance_counts": int(len(np.unique(inst[inst >= 0]))),
        "selection_report": selection.to_dict(),
    }
    _write_report(out_dir, report)
    figures.plot_class_iou(table, out_dir / "class_iou.png")
    import torch
    with torch.no_grad():
        proto = model.prototypes.scaled_points(model.stage).double().numpy()
        inten = model.prototypes.intensity.double().numpy()
    figures.plot_prototypes(proto, inten, out_dir / "prototypes.png")
    metrics = run_dir / "metrics.jsonl"
    if metrics.exists():
        figures.plot_loss_curves(metrics, out_dir / "loss_curves.png")
    click.echo(json.dumps({"miou": score, "chamfer_sym": cham}))


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_context
def decompose(ctx, run_dir, scene_path, out_dir):
    """Decompose a scene and export the colored point-cloud files."""
    run_dir = Path(run_dir)
    ckpt = training.load_checkpoint(_latest_checkpoint(run_dir))
    model = ckpt["model"]
    scene = io.load_scene(scene_path)
    patch_size = ckpt["train_config"]["patch_size_m"]
    patches = evaluation.decompose_scene(model, scene, patch_size)
    if scene.class_label is not None:
        labels = evaluation.label_prototypes(model, patches)
    else:
        labels = np.full((model.config.num_prototypes,
                          model.config.points_per_prototype), -1, dtype=np.int64)
    report = {"num_patches": len(patches),
              "active_slots": int(sum(len(pd.decomposition.slots) for pd in patches))}
    io.export_decomposition(patches, labels, model, out_dir, report=report,
                            seed=ctx.obj.get("seed") or 0)
    import torch
    with torch.no_grad():
        proto = model.prototypes.scaled_points(model.stage).double().numpy()
        inten = model.prototypes.intensity.double().numpy()
    figures.plot_prototypes(proto, inten, Path(out_dir) / "prototypes.png")
    click.echo(f"exported decomposition to {out_dir}")


@main.command("select-prototypes")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True))
@click.option("--threshold", type=float, default=0.05, show_default=True)
@click.pass_context
def select_prototypes_cmd(ctx, run_dir, scene_path, threshold):
    """Greedy prototype pruning by loss increase."""
    run_dir = Path(run_dir)
    ckpt = training.load_checkpoint(_latest_checkpoint(run_dir))
    scene = io.load_scene(scene_path)
    report = evaluation.select_prototypes(
        ckpt["model"], scene, ckpt["train_config"]["patch_size_m"],
        threshold=threshold)
    click.echo(json.dumps(report.to_dict(), indent=2))


@main.command("baseline-kmeans")
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True))
@click.option("--clusters", "-k", type=int, default=6, show_default=True)
@click.option("--features", type=str, default="intensity,elevation", show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.pass_context
def baseline_kmeans(ctx, scene_path, clusters, features, out_dir):
    """k-means clustering baseline for semantic segmentation."""
    scene = io.load_scene(scene_path)
    pred, score, table = evaluation.kmeans_baseline(
        scene, clusters, tuple(features.split(",")),
        seed=ctx.obj.get("seed") or 0)
    result = {"miou": score, "per_class_iou": {str(k): v for k, v in table.items()}}
    if out_dir:
        out_dir = Path(out_dir)
        _write_report(out_dir, {"miou": score,
                                "per_class_iou": result["per_class_iou"]})
        figures.plot_class_iou(table, out_dir / "class_iou.png")
        figures.plot_scene_overview(scene.positions, pred, out_dir / "clusters.png",
                                    title="k-means segmentation")
    click.echo(json.dumps(result))


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
def export(ctx, run_dir, out_path):
    """Export the learned prototypes as a standalone PLY file."""
    ckpt = training.load_checkpoint(_latest_checkpoint(Path(run_dir)))
    model = ckpt["model"]
    import torch
    with torch.no_grad():
        proto = model.prototypes.scaled_points(model.stage).double().numpy()
        inten = model.prototypes.intensity.double().numpy()
    k, p, _ = proto.shape
    flat = proto.reshape(-1, 3)
    pid = np.repeat(np.arange(k), p)
    color = io.color_table(pid, ctx.obj.get("seed") or 0)
    io.save_ply(out_path, {
        "x": flat[:, 0], "y": flat[:, 1], "z": flat[:, 2],
        "intensity": np.repeat(inten, p),
        "red": color[:, 0], "green": color[:, 1], "blue": color[:, 2],
        "class": pid})
    click.echo(f"wrote prototypes to {out_path}")


if __name__ == "__main__":
    main()
