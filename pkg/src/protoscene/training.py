"""Patch sampling, the staged curriculum, and the optimization loop."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .geometry import PointCloud, normalize_patch, PatchNormalization
from .losses import LossWeights, total_loss
from .model import ModelConfig, SceneModel, NUM_STAGES

MIN_PATCH_POINTS = 32
MAX_SAMPLE_REJECTIONS = 100


@dataclass
class ConvergenceConfig:
    patience_epochs: int = 5
    min_rel_improvement: float = 1e-3
    max_epochs_per_stage: int = 100

    def __post_init__(self):
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")


@dataclass
class TrainConfig:
    patch_size_m: float = 25.6
    max_points_per_patch: int = 100_000
    batch_size: int = 64
    batches_per_epoch: int = 512
    base_lr: float = 1e-4
    warmup_batches: int = 1000
    seed: int = 0
    deterministic: bool = False
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for name in ("max_points_per_patch", "batch_size", "batches_per_epoch",
                     "warmup_batches"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


def sample_patch(scene: PointCloud, size_m: float, rng: np.random.Generator,
                 max_points: int = 100_000) -> tuple[PointCloud, PatchNormalization]:
    """Crop a square patch at a uniform random center and normalize it.

    Patches with fewer than 32 points are rejected and re-drawn; after 100
    consecutive rejections the scene is considered unusable at this size.
    """
    xy = scene.positions[:, :2]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    if np.any(hi - lo < size_m):
        raise ValueError("scene horizontal extent smaller than the patch size")
    half = size_m / 2.0
    for _ in range(MAX_SAMPLE_REJECTIONS):
        center = rng.uniform(lo + half, hi - half)
        mask = np.all(np.abs(xy - center[None, :]) <= half, axis=1)
        n = int(mask.sum())
        if n < MIN_PATCH_POINTS:
            continue
        patch = scene.select(mask)
        if n > max_points:
            keep = rng.choice(n, size=max_points, replace=False)
            patch = patch.select(np.sort(keep))
        return normalize_patch(patch, center, size_m)
    raise RuntimeError(f"{MAX_SAMPLE_REJECTIONS} consecutive patch rejections")


def inference_grid(scene: PointCloud, size_m: float) -> list[tuple[PointCloud, PatchNormalization]]:
    """Partition the scene into non-overlapping square tiles.

    Every scene point lands in exactly one tile; empty tiles are skipped.
    """
    xy = scene.positions[:, :2]
    lo = xy.min(axis=0)
    cell = np.floor((xy - lo[None, :]) / size_m).astype(np.int64)
    ncols = int(cell[:, 1].max()) + 1 if len(cell) else 0
    flat = cell[:, 0] * ncols + cell[:, 1]
    patches = []
    for tid in np.unique(flat):
        idx = np.flatnonzero(flat == tid)
        i, j = int(tid) // ncols, int(tid) % ncols
        center = lo + (np.array([i, j]) + 0.5) * size_m
        patches.append(normalize_patch(scene.select(idx), center, size_m))
    return patches


def warmup_lr(step_in_stage: int, base_lr: float, warmup_batches: int = 1000) -> float:
    """Linear ramp from base_lr/1000 at step 0 to base_lr at the warmup end."""
    if step_in_stage >= warmup_batches:
        return base_lr
    start = base_lr / 1000.0
    return start + (base_lr - start) * (step_in_stage / warmup_batches)


def advance_stage(epoch_losses: List[float], convergence: ConvergenceConfig) -> bool:
    """True when the best loss has stopped improving for patience epochs."""
    if len(epoch_losses) < convergence.patience_epochs + 1:
        return False
    window = epoch_losses[-convergence.patience_epochs:]
    best_before = min(epoch_losses[:-convergence.patience_epochs])
    if best_before <= 0:
        return min(window) >= best_before
    improvement = (best_before - min(window)) / abs(best_before)
    return improvement < convergence.min_rel_improvement


def build_optimizer(model: SceneModel, lr: float, weight_decay: float = 0.0) -> torch.optim.Adam:
    """Adam with weight decay disabled on the prototype parameter groups."""
    groups = model.parameter_groups()
    decayed, undecayed = [], []
    for name, params in groups.items():
        (undecayed if name.startswith("proto_") else decayed).extend(params)
    return torch.optim.Adam([
        {"params": decayed, "weight_decay": weight_decay},
        {"params": undecayed, "weight_decay": 0.0},
    ], lr=lr)


def save_checkpoint(path: Path, model: SceneModel, optimizer, config: TrainConfig,
                    stage: int, epoch: int, global_step: int):
    torch.save({
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "model_config": asdict(config.model),
        "train_config": asdict(config),
        "stage": stage,
        "epoch": epoch,
        "global_step": global_step,
    }, path)


def load_checkpoint(path: Path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    mc = ModelConfig(**{**ckpt["model_config"],
                        "scale_bounds": tuple(ckpt["model_config"]["scale_bounds"]),
                        "proto_init_half_extent": tuple(ckpt["model_config"]["proto_init_half_extent"])})
    model = SceneModel(mc)
    model.load_state_dict(ckpt["model_state"])
    model.apply_stage_freezing(ckpt["stage"])
    ckpt["model"] = model
    return ckpt


class Trainer:
    """Runs the five-stage curriculum on one scene."""

    def __init__(self, scene: PointCloud, config: TrainConfig,
                 out_dir: Optional[Path] = None, model: Optional[SceneModel] = None):
        self.scene = scene
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(config.seed)
        if config.deterministic:
            torch.use_deterministic_algorithms(True)
            torch.set_num_threads(max(1, torch.get_num_threads()))
        self.model = model if model is not None else SceneModel(config.model, seed=config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.global_step = 0
        self._metrics_fh = None
        if self.out_dir is not None:
            self._metrics_fh = open(self.out_dir / "metrics.jsonl", "a")

    def close(self):
        if self._metrics_fh is not None:
            self._metrics_fh.close()
            self._metrics_fh = None

    def _log(self, record: dict):
        if self._metrics_fh is not None:
            self._metrics_fh.write(json.dumps(record) + "\n")
            self._metrics_fh.flush()

    def sample_batch(self) -> tuple[list, list, list]:
        patches, xs, intensities = [], [], []
        for _ in range(self.config.batch_size):
            patch, _ = sample_patch(self.scene, self.config.patch_size_m, self.rng,
                                    self.config.max_points_per_patch)
            patches.append(patch)
            xs.append(torch.from_numpy(patch.positions).to(self._dtype()))
            if patch.intensity is not None and self.config.model.use_intensity:
                intensities.append(torch.from_numpy(patch.intensity).to(self._dtype()))
            else:
                intensities.append(None)
        return patches, xs, intensities

    def _dtype(self):
        return next(self.model.parameters()).dtype

    def train_step(self, optimizer, lr: float, stage: int):
        for group in optimizer.param_groups:
            group["lr"] = lr
        patches, xs, intensities = self.sample_batch()
        cand = self.model.reconstruct(patches)
        total, report = total_loss(cand, xs, intensities, self.config.weights)
        if not math.isfinite(report.total):
            self._dump_bad_batch(patches, report)
            raise FloatingPointError(f"non-finite loss at step {self.global_step}: {report}")
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        self.global_step += 1
        self._log({"step": self.global_step, "stage": stage, "lr": lr, **report.to_dict()})
        return report

    def _dump_bad_batch(self, patches, report):
        if self.out_dir is None:
            return
        dump = {
            "report": report.to_dict(),
            "step": self.global_step,
            "patch_sizes": [len(p) for p in patches],
        }
        (self.out_dir / "diagnostic_batch.json").write_text(json.dumps(dump, indent=2))

    def run_stage(self, stage: int) -> list[float]:
        cfg = self.config
        self.model.apply_stage_freezing(stage)
        optimizer = build_optimizer(self.model, cfg.base_lr)
        epoch_losses = []
        step_in_stage = 0
        for epoch in range(cfg.convergence.max_epochs_per_stage):
            epoch_total = 0.0
            for _ in range(cfg.batches_per_epoch):
                lr = warmup_lr(step_in_stage, cfg.base_lr, cfg.warmup_batches)
                report = self.train_step(optimizer, lr, stage)
                epoch_total += report.total
                step_in_stage += 1
            epoch_losses.append(epoch_total / cfg.batches_per_epoch)
            if self.out_dir is not None:
                save_checkpoint(self.out_dir / f"ckpt_stage{stage}_epoch{epoch + 1}",
                                self.model, optimizer, cfg, stage, epoch + 1,
                                self.global_step)
            if advance_stage(epoch_losses, cfg.convergence):
                break
        if self.out_dir is not None:
            save_checkpoint(self.out_dir / f"ckpt_stage{stage}_final",
                            self.model, optimizer, cfg, stage, len(epoch_losses),
                            self.global_step)
        return epoch_losses

    def train(self) -> SceneModel:
        """Run all five stages sequentially; warmup restarts at each stage."""
        for stage in range(1, NUM_STAGES + 1):
            self.run_stage(stage)
        self.close()
        return self.model


def train(scene: PointCloud, config: TrainConfig, out_dir=None) -> SceneModel:
    return Trainer(scene, config, out_dir=out_dir).train()
