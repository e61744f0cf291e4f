"""Learnable reconstruction model.

A scene patch is encoded into a single feature vector; per-slot heads then
produce an activation/choice distribution and an affine placement for one of
K learnable prototype point clouds. During training all S*K candidate
reconstructions are produced; at inference only slots with activation
probability above 0.5 contribute, each placing its most likely prototype.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn

from .geometry import PointCloud

# Curriculum stages (cumulative unlocking).
STAGE_TRANSFORMS = 1      # translation, rotations, tilt, activation, choice
STAGE_INTENSITIES = 2     # prototype intensities
STAGE_SCALES = 3          # prototype base scale + tied slot scale channel
STAGE_POINTS = 4          # prototype point positions
STAGE_ANISO = 5           # anisotropic prototype scales + free slot channels
NUM_STAGES = 5


@dataclass
class ModelConfig:
    num_slots: int = 64
    num_prototypes: int = 6
    points_per_prototype: int = 256
    grid_resolution: int = 64
    voxel_size_m: float = 0.4
    point_feature_dim: int = 16
    scene_feature_dim: int = 1024
    slot_feature_dim: int = 128
    transform_mode: str = "constrained"  # or "full-affine"
    use_intensity: bool = True
    scale_bounds: tuple = (0.5, 2.0)
    proto_init_half_extent: tuple = (0.05, 0.3)

    def __post_init__(self):
        if self.num_slots < 1 or self.num_prototypes < 1:
            raise ValueError("num_slots and num_prototypes must be >= 1")
        if self.grid_resolution & (self.grid_resolution - 1):
            raise ValueError("grid_resolution must be a power of two")
        if self.transform_mode not in ("constrained", "full-affine"):
            raise ValueError(f"unknown transform_mode {self.transform_mode!r}")

    @property
    def patch_size_m(self) -> float:
        return self.voxel_size_m * self.grid_resolution


@dataclass
class CandidateSet:
    """All S*K candidate reconstructions for a batch of patches."""

    alpha: torch.Tensor        # (B, S)
    beta: torch.Tensor         # (B, S, K)
    scale: torch.Tensor        # (B, S, 3)
    tilt_y: torch.Tensor       # (B, S)
    rot_z: torch.Tensor        # (B, S)
    translation: torch.Tensor  # (B, S, 3)
    candidates: torch.Tensor   # (B, S, K, P, 3), patch frame
    proto_intensity: torch.Tensor  # (K,)
    affine: Optional[torch.Tensor] = None  # (B, S, 3, 3) in full-affine mode

    @property
    def num_slots(self) -> int:
        return self.alpha.shape[1]

    @property
    def num_prototypes(self) -> int:
        return self.beta.shape[2]


@dataclass
class SlotDecomposition:
    slot: int
    prototype: int
    points: np.ndarray          # (P, 3) patch frame
    intensity: float
    alpha: float


@dataclass
class Decomposition:
    """Active slots of one patch plus the nearest-reconstruction assignment
    of every input point: (slot_rank, point_within_prototype) or (-1, -1)."""

    slots: List[SlotDecomposition]
    point_slot: np.ndarray      # (N,) index into ``slots`` or -1
    point_proto_point: np.ndarray  # (N,) or -1

    @property
    def empty(self) -> bool:
        return len(self.slots) == 0


def init_prototypes(config: ModelConfig, seed: int = 0) -> torch.Tensor:
    """Uniform samples from one random axis-aligned cuboid per prototype.

    Per-axis half-extents are drawn uniformly from the configured range;
    cuboids are centered at the origin.
    """
    rng = np.random.default_rng(seed)
    lo, hi = config.proto_init_half_extent
    half = rng.uniform(lo, hi, size=(config.num_prototypes, 1, 3))
    pts = rng.uniform(-1.0, 1.0, size=(config.num_prototypes, config.points_per_prototype, 3))
    return torch.from_numpy(pts * half)


class PrototypeBank(nn.Module):
    """K learnable prototype point clouds with intensity and scale parameters."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.points = nn.Parameter(init_prototypes(config, seed).float())
        self.intensity_logit = nn.Parameter(torch.zeros(config.num_prototypes))
        self.base_log_scale = nn.Parameter(torch.zeros(config.num_prototypes))
        self.aniso_log_scale = nn.Parameter(torch.zeros(config.num_prototypes, 3))

    @property
    def intensity(self) -> torch.Tensor:
        return torch.sigmoid(self.intensity_logit)

    def scaled_points(self, stage: int) -> torch.Tensor:
        """Prototype points with per-prototype scales folded in, (K, P, 3)."""
        pts = self.points
        if stage >= STAGE_SCALES:
            pts = pts * torch.exp(self.base_log_scale)[:, None, None]
        if stage >= STAGE_ANISO:
            pts = pts * torch.exp(self.aniso_log_scale)[:, None, :]
        return pts


def _mlp(in_dim: int, hidden: int, out_dim: int, zero_last: bool = True) -> nn.Sequential:
    last = nn.Linear(hidden, out_dim)
    if zero_last:
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.LayerNorm(hidden), nn.LeakyReLU(),
        nn.Linear(hidden, hidden), nn.LayerNorm(hidden), nn.LeakyReLU(),
        last,
    )


class SceneEncoder(nn.Module):
    """Point descriptors -> voxel max-pool -> conv stack -> scene feature.

    Each strided block halves the grid; widths grow geometrically from the
    point feature width to the scene feature width.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.point_encoder = nn.Linear(10, config.point_feature_dim)
        n_blocks = int(math.log2(config.grid_resolution))
        w0, w1 = config.point_feature_dim, config.scene_feature_dim
        widths = [round(w0 * (w1 / w0) ** (i / n_blocks)) for i in range(n_blocks + 1)]
        widths[-1] = w1
        blocks = []
        for i in range(n_blocks):
            blocks.append(nn.Sequential(
                nn.Conv3d(widths[i], widths[i], 3, padding=1),
                nn.GroupNorm(1, widths[i]),
                nn.LeakyReLU(),
                nn.Conv3d(widths[i], widths[i + 1], 2, stride=2),
                nn.GroupNorm(1, widths[i + 1]),
                nn.LeakyReLU(),
            ))
        self.blocks = nn.Sequential(*blocks)

    def _dtype(self):
        return self.point_encoder.weight.dtype

    def descriptors(self, patch: PointCloud) -> tuple[torch.Tensor, torch.Tensor]:
        """10-D per-point descriptors and flat voxel ids for one patch.

        Descriptor: position in [-1,1]^3, rgb, reflectance, and the offset to
        the assigned voxel center. Missing color/reflectance fill with 0.5.
        """
        r = self.config.grid_resolution
        voxel = 2.0 / r
        pos = torch.from_numpy(patch.positions).to(self._dtype())
        n = pos.shape[0]
        if n == 0:
            raise ValueError("cannot encode an empty patch")
        ijk = torch.clamp(torch.floor((pos - torch.tensor([-1.0, -1.0, 0.0])) / voxel).long(),
                           0, r - 1)
        flat = (ijk[:, 0] * r + ijk[:, 1]) * r + ijk[:, 2]
        centers = (ijk.to(pos.dtype) + 0.5) * voxel + torch.tensor([-1.0, -1.0, 0.0], dtype=pos.dtype)
        offset = (pos - centers) / voxel
        pos_desc = pos.clone()
        pos_desc[:, 2] = torch.clamp(pos_desc[:, 2] - 1.0, -1.0, 1.0)
        if patch.color is not None:
            rgb = torch.from_numpy(patch.color).to(pos.dtype)
        else:
            rgb = torch.full((n, 3), 0.5, dtype=pos.dtype)
        if patch.intensity is not None and self.config.use_intensity:
            refl = torch.from_numpy(patch.intensity).to(pos.dtype)[:, None]
        else:
            refl = torch.full((n, 1), 0.5, dtype=pos.dtype)
        desc = torch.cat([pos_desc, rgb, refl, offset], dim=1)
        return desc, flat

    def forward(self, patches: List[PointCloud]) -> torch.Tensor:
        r = self.config.grid_resolution
        c = self.config.point_feature_dim
        grids = []
        for patch in patches:
            desc, flat = self.descriptors(patch)
            feats = self.point_encoder(desc)  # (N, C)
            grid = torch.full((r * r * r, c), float("-inf"), dtype=feats.dtype)
            grid = grid.scatter_reduce(0, flat[:, None].expand(-1, c), feats,
                                       reduce="amax", include_self=True)
            grid = torch.where(torch.isinf(grid), torch.zeros((), dtype=feats.dtype), grid)
            grids.append(grid.t().reshape(c, r, r, r))
        x = torch.stack(grids)  # (B, C, R, R, R)
        x = self.blocks(x)
        return x.reshape(x.shape[0], -1)  # (B, scene_feature_dim)


class SceneModel(nn.Module):
    """Full reconstruction model: prototype bank, encoder and slot heads."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.prototypes = PrototypeBank(config, seed)
        self.encoder = SceneEncoder(config)
        s, f, d = config.num_slots, config.scene_feature_dim, config.slot_feature_dim
        self.slot_extractor = nn.Linear(f, s * d)
        k = config.num_prototypes
        self.head_proba = _mlp(d, d, k + 1)
        self.head_tilt = _mlp(d, d, 1)
        self.head_rotz = _mlp(d, d, 2)
        self.head_translate = _mlp(d, d, 3)
        if config.transform_mode == "full-affine":
            self.head_affine = _mlp(d, d, 9)
        else:
            self.head_scale = _mlp(d, d, 3)
        self.stage = STAGE_TRANSFORMS

    def set_stage(self, stage: int):
        if not 1 <= stage <= NUM_STAGES:
            raise ValueError(f"stage must be in 1..{NUM_STAGES}")
        self.stage = stage

    # -- parameter groups -------------------------------------------------
    def parameter_groups(self) -> dict:
        """Named groups used by the curriculum to freeze/unfreeze and by the
        optimizer to switch off weight decay on prototype parameters."""
        groups = {
            "network": list(self.encoder.parameters())
            + list(self.slot_extractor.parameters())
            + list(self.head_proba.parameters())
            + list(self.head_tilt.parameters())
            + list(self.head_rotz.parameters())
            + list(self.head_translate.parameters()),
            "proto_points": [self.prototypes.points],
            "proto_intensity": [self.prototypes.intensity_logit],
            "proto_scale": [self.prototypes.base_log_scale],
            "proto_aniso": [self.prototypes.aniso_log_scale],
        }
        if self.config.transform_mode == "full-affine":
            groups["scale_head"] = list(self.head_affine.parameters())
        else:
            groups["scale_head"] = list(self.head_scale.parameters())
        return groups

    def unlocked_groups(self, stage: int) -> set:
        unlocked = {"network"}
        if stage >= STAGE_SCALES:
            unlocked.add("scale_head")
        if stage >= STAGE_INTENSITIES:
            unlocked.add("proto_intensity")
        if stage >= STAGE_SCALES:
            unlocked.add("proto_scale")
        if stage >= STAGE_POINTS:
            unlocked.add("proto_points")
        if stage >= STAGE_ANISO:
            unlocked.add("proto_aniso")
        return unlocked

    def apply_stage_freezing(self, stage: int):
        self.set_stage(stage)
        unlocked = self.unlocked_groups(stage)
        for name, params in self.parameter_groups().items():
            flag = name in unlocked
            for p in params:
                p.requires_grad_(flag)

    # -- heads ------------------------------------------------------------
    def slot_params(self, scene_feature: torch.Tensor) -> dict:
        """Slot distributions and transform parameters from scene features."""
        b = scene_feature.shape[0]
        s, d = self.config.num_slots, self.config.slot_feature_dim
        k = self.config.num_prototypes
        slot_feat = self.slot_extractor(scene_feature).reshape(b, s, d)
        logits = self.head_proba(slot_feat)            # (B, S, K+1)
        probs = torch.softmax(logits, dim=-1)
        alpha = 1.0 - probs[..., 0]
        beta = probs[..., 1:]
        tilt = torch.tanh(self.head_tilt(slot_feat)[..., 0]) * (math.pi / 10.0)
        uv = self.head_rotz(slot_feat)                 # (B, S, 2)
        degenerate = (uv.abs().sum(-1, keepdim=True) == 0)
        u = torch.where(degenerate, torch.ones_like(uv[..., :1]), uv[..., :1])
        rot_z = torch.atan2(uv[..., 1], u[..., 0])
        translation = self.head_translate(slot_feat)   # (B, S, 3)
        out = {"alpha": alpha, "beta": beta, "tilt_y": tilt, "rot_z": rot_z,
               "translation": translation, "logits": logits}
        if self.config.transform_mode == "full-affine":
            raw = self.head_affine(slot_feat).reshape(b, s, 3, 3)
            eye = torch.eye(3, dtype=raw.dtype)
            out["affine"] = eye + raw
            out["scale"] = torch.ones(b, s, 3, dtype=raw.dtype)
        else:
            out["scale"] = self._slot_scale(slot_feat)
        return out

    def _slot_scale(self, slot_feat: torch.Tensor) -> torch.Tensor:
        b, s, _ = slot_feat.shape
        if self.stage < STAGE_SCALES:
            return torch.ones(b, s, 3, dtype=slot_feat.dtype)
        raw = self.head_scale(slot_feat)               # (B, S, 3)
        if self.stage < STAGE_ANISO:
            raw = raw.mean(dim=-1, keepdim=True).expand(b, s, 3)
        lo, hi = self.config.scale_bounds
        # tanh-bounded log-scale: 0 maps to 1, extremes to the bounds
        half_log = 0.5 * math.log(hi / lo)
        center = 0.5 * (math.log(hi) + math.log(lo))
        return torch.exp(center + torch.tanh(raw) * half_log)

    # -- forward ----------------------------------------------------------
    def reconstruct(self, patches: List[PointCloud]) -> CandidateSet:
        """All candidate reconstructions for a batch of patches."""
        feature = self.encoder(patches)
        params = self.slot_params(feature)
        proto = self.prototypes.scaled_points(self.stage)   # (K, P, 3)
        candidates = self.place_prototypes(params, proto)
        return CandidateSet(
            alpha=params["alpha"], beta=params["beta"], scale=params["scale"],
            tilt_y=params["tilt_y"], rot_z=params["rot_z"],
            translation=params["translation"], candidates=candidates,
            proto_intensity=self.prototypes.intensity,
            affine=params.get("affine"),
        )

    def place_prototypes(self, params: dict, proto: torch.Tensor) -> torch.Tensor:
        """Apply each slot's transform to every prototype: (B, S, K, P, 3).

        Constrained mode composes scaling, y-tilt, z-rotation, translation in
        that order; full-affine replaces the first three with a free matrix.
        """
        pts = proto[None, None]                            # (1, 1, K, P, 3)
        if params.get("affine") is not None:
            m = params["affine"][:, :, None]               # (B, S, 1, 3, 3)
            pts = torch.einsum("bskij,bskpj->bskpi", m.expand(*m.shape[:2], proto.shape[0], 3, 3),
                               pts.expand(m.shape[0], m.shape[1], *proto.shape))
        else:
            pts = pts * params["scale"][:, :, None, None, :]
            ty, rz = params["tilt_y"], params["rot_z"]
            cy, sy = torch.cos(ty), torch.sin(ty)
            cz, sz = torch.cos(rz), torch.sin(rz)
            zeros = torch.zeros_like(cy)
            ones = torch.ones_like(cy)
            ry = torch.stack([
                torch.stack([cy, zeros, sy], -1),
                torch.stack([zeros, ones, zeros], -1),
                torch.stack([-sy, zeros, cy], -1)], -2)    # (B, S, 3, 3)
            rzm = torch.stack([
                torch.stack([cz, -sz, zeros], -1),
                torch.stack([sz, cz, zeros], -1),
                torch.stack([zeros, zeros, ones], -1)], -2)
            rot = rzm @ ry
            pts = torch.einsum("bsij,bskpj->bskpi", rot, pts)
        return pts + params["translation"][:, :, None, None, :]

    @torch.no_grad()
    def infer(self, patch: PointCloud, loss_space_assign: bool = True) -> Decomposition:
        """Decompose one patch: slots with alpha > 0.5, each with its
        argmax-beta prototype, plus per-input-point nearest assignments."""
        cand = self.reconstruct([patch])
        alpha = cand.alpha[0].double().numpy()
        beta = cand.beta[0].double().numpy()
        active = np.flatnonzero(alpha > 0.5)
        slots = []
        for s in active:
            k = int(np.argmax(beta[s]))  # argmax takes the lowest index on ties
            slots.append(SlotDecomposition(
                slot=int(s), prototype=k,
                points=cand.candidates[0, s, k].double().numpy(),
                intensity=float(cand.proto_intensity[k]),
                alpha=float(alpha[s]),
            ))
        n = len(patch)
        point_slot = np.full(n, -1, dtype=np.int64)
        point_pp = np.full(n, -1, dtype=np.int64)
        if slots:
            from .nn_backend import nearest_sq
            from .geometry import to_loss_space, loss_space_bounds

            if loss_space_assign and patch.intensity is not None:
                bounds = loss_space_bounds(patch)
                x = to_loss_space(patch, bounds=bounds)
                ys = [to_loss_space(
                    PointCloud(sd.points, frame=patch.frame), bounds=bounds,
                    intensity_override=np.full(len(sd.points), sd.intensity))
                    for sd in slots]
            else:
                x = patch.positions
                ys = [sd.points for sd in slots]
            y_all = np.concatenate(ys, axis=0)
            _, idx = nearest_sq(x, y_all)
            p = self.config.points_per_prototype
            point_slot = idx // p
            point_pp = idx % p
        return Decomposition(slots=slots, point_slot=point_slot, point_proto_point=point_pp)
