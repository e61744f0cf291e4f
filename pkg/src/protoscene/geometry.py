"""Point-cloud containers, affine transforms, voxelization and Chamfer distances.

Everything here is a pure function over immutable inputs; the containers are
plain numpy-backed dataclasses shared by the model, losses, training and
evaluation code.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nn_backend import nearest_sq

FRAME_SCENE = "scene"
FRAME_PATCH = "patch-normalized"

DEFAULT_SCALE_BOUNDS = (0.5, 2.0)
TILT_BOUND = np.pi / 10.0


@dataclass
class PointCloud:
    """N points with positions plus optional per-point channels.

    Optional channels must match the length of ``positions``. ``class_label``
    and ``instance_label`` use -1 for unlabeled/none.
    """

    positions: np.ndarray
    intensity: Optional[np.ndarray] = None
    color: Optional[np.ndarray] = None
    class_label: Optional[np.ndarray] = None
    instance_label: Optional[np.ndarray] = None
    frame: str = FRAME_SCENE

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must have shape (N, 3)")
        n = len(self.positions)
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(self.intensity) != n:
                raise ValueError("intensity length mismatch")
        if self.color is not None:
            self.color = np.asarray(self.color, dtype=np.float64)
            if self.color.shape != (n, 3):
                raise ValueError("color must have shape (N, 3)")
        for name in ("class_label", "instance_label"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.int64).reshape(-1)
                if len(v) != n:
                    raise ValueError(f"{name} length mismatch")
                setattr(self, name, v)

    def __len__(self) -> int:
        return len(self.positions)

    def select(self, mask_or_index) -> "PointCloud":
        """Return the sub-cloud at the given boolean mask or index array."""
        def take(v):
            return None if v is None else v[mask_or_index]

        return PointCloud(
            positions=self.positions[mask_or_index],
            intensity=take(self.intensity),
            color=take(self.color),
            class_label=take(self.class_label),
            instance_label=take(self.instance_label),
            frame=self.frame,
        )

    def with_positions(self, positions: np.ndarray) -> "PointCloud":
        return dataclasses.replace(self, positions=np.asarray(positions, dtype=np.float64))


@dataclass
class AffineTransform:
    """Per-slot placement: scaling, then y-tilt, then z-rotation, then translation."""

    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    tilt_y: float = 0.0
    rot_z: float = 0.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale_bounds: tuple = DEFAULT_SCALE_BOUNDS

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        lo, hi = self.scale_bounds
        if np.any(self.scale < lo - 1e-12) or np.any(self.scale > hi + 1e-12):
            raise ValueError(f"scale outside [{lo}, {hi}]: {self.scale}")
        if abs(self.tilt_y) > TILT_BOUND + 1e-12:
            raise ValueError(f"tilt_y outside [-pi/10, pi/10]: {self.tilt_y}")
        if abs(self.rot_z) > np.pi + 1e-12:
            raise ValueError(f"rot_z outside [-pi, pi]: {self.rot_z}")

    def rotation_matrix(self) -> np.ndarray:
        cy, sy = np.cos(self.tilt_y), np.sin(self.tilt_y)
        cz, sz = np.cos(self.rot_z), np.sin(self.rot_z)
        ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
        rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
        return rz @ ry

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 matrix: translate @ Rz @ Ry @ diag(scale)."""
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix() @ np.diag(self.scale)
        m[:3, 3] = self.translation
        return m


def apply_transform(t: AffineTransform, p: PointCloud) -> PointCloud:
    """Apply the slot transform to all positions; other channels are copied."""
    pos = p.positions * t.scale[None, :]
    pos = pos @ t.rotation_matrix().T
    pos = pos + t.translation[None, :]
    return p.with_positions(pos)


def _coords(x) -> np.ndarray:
    arr = x.positions if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2D coordinate array")
    return arr


def chamfer_asym(x, y) -> float:
    """Mean over x of squared distance to the nearest point of y.

    Accepts PointCloud or raw (N, d) arrays with d in {3, 4}.
    """
    xa, ya = _coords(x), _coords(y)
    if len(xa) == 0:
        raise ValueError("empty query cloud")
    if len(ya) == 0:
        raise ValueError("empty reference cloud: nearest-point minimum undefined")
    if xa.shape[1] != ya.shape[1]:
        raise ValueError("feature dimensionality mismatch")
    d2, _ = nearest_sq(xa, ya)
    return float(np.mean(d2))


def chamfer_sym(x, y) -> float:
    """Symmetric Chamfer distance: both asymmetric directions summed."""
    return chamfer_asym(x, y) + chamfer_asym(y, x)


INTENSITY_LOSS_SCALE = 0.1


def loss_space_bounds(p: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis bounding box of the cloud, used as the loss-space reference."""
    return p.positions.min(axis=0), p.positions.max(axis=0)


def to_loss_space(p: PointCloud, bounds=None, intensity_override=None) -> np.ndarray:
    """Map positions to [0,1]^3 (relative to ``bounds``) and append intensity
    rescaled to [0, 0.1] as a 4th coordinate.

    When the cloud carries no intensity (and no override is given) the result
    is a plain 3D array; callers flag that in the run config.
    """
    lo, hi = loss_space_bounds(p) if bounds is None else bounds
    span = np.where(hi - lo > 1e-12, hi - lo, 1.0)
    pos = (p.positions - lo[None, :]) / span[None, :]
    intensity = p.intensity if intensity_override is None else intensity_override
    if intensity is None:
        return pos
    intensity = np.broadcast_to(np.asarray(intensity, dtype=np.float64).reshape(-1), (len(p),))
    return np.concatenate([pos, (intensity * INTENSITY_LOSS_SCALE)[:, None]], axis=1)


def clip_to_extent(y: PointCloud) -> PointCloud:
    """Keep only points whose horizontal coordinates lie in the closed square
    [-1,1]^2; z is unconstrained. May return an empty cloud."""
    xy = y.positions[:, :2]
    mask = np.all((xy >= -1.0) & (xy <= 1.0), axis=1)
    return y.select(mask)


@dataclass
class VoxelGrid:
    resolution: tuple
    voxel_size: float
    origin: np.ndarray
    occupancy: dict
    point_assignment: np.ndarray

    def voxel_center(self, flat_ids: np.ndarray) -> np.ndarray:
        rx, ry, rz = self.resolution
        k = flat_ids % rz
        j = (flat_ids // rz) % ry
        i = flat_ids // (ry * rz)
        ijk = np.stack([i, j, k], axis=-1).astype(np.float64)
        return self.origin[None, :] + (ijk + 0.5) * self.voxel_size


def voxelize(p: PointCloud, resolution=(64, 64, 64), voxel_size: float = None,
             origin: np.ndarray = None) -> VoxelGrid:
    """Assign every point to a voxel of an axis-aligned grid.

    The grid starts at ``origin`` (defaults to the cloud's min corner);
    out-of-bounds points clamp to the boundary voxel. ``voxel_size`` defaults
    to the size that makes the grid cover the cloud's bounding box.
    """
    res = np.asarray(resolution, dtype=np.int64).reshape(3)
    if origin is None:
        origin = p.positions.min(axis=0)
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    if voxel_size is None:
        extent = p.positions.max(axis=0) - origin
        voxel_size = float(np.max(extent) / res.max())
        if voxel_size <= 0:
            voxel_size = 1.0
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    ijk = np.floor((p.positions - origin[None, :]) / voxel_size).astype(np.int64)
    ijk = np.clip(ijk, 0, res[None, :] - 1)
    flat = (ijk[:, 0] * res[1] + ijk[:, 1]) * res[2] + ijk[:, 2]
    occupancy = {}
    for vid in np.unique(flat):
        occupancy[int(vid)] = np.flatnonzero(flat == vid)
    return VoxelGrid(
        resolution=tuple(int(r) for r in res),
        voxel_size=float(voxel_size),
        origin=origin,
        occupancy=occupancy,
        point_assignment=flat,
    )


@dataclass
class PatchNormalization:
    """Mapping between the scene frame and one patch's normalized frame.

    Horizontal coordinates of the sampled square map to [-1,1]^2; z shares the
    same scale factor and is offset by the patch's minimum elevation.
    """

    center_xy: np.ndarray
    z_floor: float
    half_size: float

    @property
    def scale(self) -> float:
        return 1.0 / self.half_size

    def to_patch(self, positions: np.ndarray) -> np.ndarray:
        out = positions.copy()
        out[:, 0] = (out[:, 0] - self.center_xy[0]) * self.scale
        out[:, 1] = (out[:, 1] - self.center_xy[1]) * self.scale
        out[:, 2] = (out[:, 2] - self.z_floor) * self.scale
        return out

    def to_scene(self, positions: np.ndarray) -> np.ndarray:
        out = positions.copy()
        out[:, 0] = out[:, 0] * self.half_size + self.center_xy[0]
        out[:, 1] = out[:, 1] * self.half_size + self.center_xy[1]
        out[:, 2] = out[:, 2] * self.half_size + self.z_floor
        return out


def normalize_patch(p: PointCloud, center_xy, size_m: float) -> tuple[PointCloud, PatchNormalization]:
    """Express a square crop in its normalized frame."""
    center_xy = np.asarray(center_xy, dtype=np.float64).reshape(2)
    norm = PatchNormalization(
        center_xy=center_xy,
        z_floor=float(p.positions[:, 2].min()) if len(p) else 0.0,
        half_size=size_m / 2.0,
    )
    out = p.with_positions(norm.to_patch(p.positions))
    out.frame = FRAME_PATCH
    return out, norm
