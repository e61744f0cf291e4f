"""Unsupervised decomposition of large point clouds into transformed
learnable prototype shapes."""

from .geometry import (AffineTransform, PointCloud, apply_transform,
                       chamfer_asym, chamfer_sym, clip_to_extent,
                       to_loss_space, voxelize)
from .losses import LossReport, LossWeights, total_loss
from .model import ModelConfig, SceneModel
from .training import TrainConfig, Trainer, train

__all__ = [
    "AffineTransform", "PointCloud", "apply_transform", "chamfer_asym",
    "chamfer_sym", "clip_to_extent", "to_loss_space", "voxelize",
    "LossReport", "LossWeights", "total_loss", "ModelConfig", "SceneModel",
    "TrainConfig", "Trainer", "train",
]
