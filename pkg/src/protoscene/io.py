"""Scene file ingestion/export, run configuration files, and the synthetic
scene generator used for acceptance testing.

Supported scene formats: ASCII PLY, binary little-endian PLY, and columnar
text with a one-line header naming the columns. LAS/LAZ must be converted
externally to one of these.
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .geometry import PointCloud
from .losses import LossWeights
from .model import ModelConfig
from .training import ConvergenceConfig, TrainConfig

KNOWN_COLUMNS = ("x", "y", "z", "intensity", "red", "green", "blue",
                 "class", "instance")


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------

def _cloud_columns(cloud: PointCloud) -> dict:
    cols = {"x": cloud.positions[:, 0], "y": cloud.positions[:, 1],
            "z": cloud.positions[:, 2]}
    if cloud.intensity is not None:
        cols["intensity"] = cloud.intensity
    if cloud.color is not None:
        cols["red"] = cloud.color[:, 0]
        cols["green"] = cloud.color[:, 1]
        cols["blue"] = cloud.color[:, 2]
    if cloud.class_label is not None:
        cols["class"] = cloud.class_label
    if cloud.instance_label is not None:
        cols["instance"] = cloud.instance_label
    return cols


def _cloud_from_columns(cols: dict, path, intensity_range: float = 1.0) -> PointCloud:
    for req in ("x", "y", "z"):
        if req not in cols:
            raise ValueError(f"{path}: missing required column {req!r}")
    pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    finite = np.isfinite(pos).all(axis=1)
    dropped = int((~finite).sum())
    if dropped:
        warnings.warn(f"{path}: rejected {dropped} rows with non-finite coordinates")
    def col(name, dtype=np.float64):
        v = cols.get(name)
        return None if v is None else np.asarray(v, dtype=dtype)[finite]
    intensity = col("intensity")
    if intensity is not None and intensity_range != 1.0:
        intensity = intensity / intensity_range
    color = None
    if all(c in cols for c in ("red", "green", "blue")):
        color = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)[finite]
        if color.max(initial=0.0) > 1.0:
            color = color / 255.0
    return PointCloud(
        positions=pos[finite],
        intensity=intensity,
        color=color,
        class_label=col("class", np.int64),
        instance_label=col("instance", np.int64),
    )


_PLY_TYPES = {"float": ("<f4", "f"), "float32": ("<f4", "f"),
              "double": ("<f8", "d"), "float64": ("<f8", "d"),
              "uchar": ("<u1", "B"), "uint8": ("<u1", "B"),
              "int": ("<i4", "i"), "int32": ("<i4", "i"),
              "uint": ("<u4", "I"), "uint32": ("<u4", "I")}


def load_ply(path) -> dict:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        n = None
        props: list = []
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated PLY header")
            tokens = line.decode("ascii", "replace").split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                if tokens[1] == "vertex":
                    n = int(tokens[2])
                elif n is not None:
                    raise ValueError(f"{path}: elements after vertex unsupported")
            elif tokens[0] == "property" and n is not None:
                props.append((tokens[2], tokens[1]))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian") or n is None:
            raise ValueError(f"{path}: unsupported PLY layout")
        names = [p[0] for p in props]
        if fmt == "ascii":
            data = np.loadtxt(fh, dtype=np.float64, max_rows=n, ndmin=2)
            cols = {name: data[:, i] for i, name in enumerate(names)}
        else:
            dtype = np.dtype([(name, _PLY_TYPES[t][0]) for name, t in props])
            raw = np.frombuffer(fh.read(dtype.itemsize * n), dtype=dtype, count=n)
            cols = {name: np.asarray(raw[name], dtype=np.float64) for name in names}
    return cols


def save_ply(path, cols: dict, binary: bool = True, color_uint8: bool = True):
    """Write a vertex-only PLY. x/y/z as double; red/green/blue as uchar in
    0..255 when ``color_uint8``; class/instance as int; other floats single."""
    names = list(cols)
    n = len(cols[names[0]])
    types = {}
    for name in names:
        if name in ("x", "y", "z"):
            types[name] = "double"
        elif name in ("red", "green", "blue") and color_uint8:
            types[name] = "uchar"
        elif name in ("class", "instance"):
            types[name] = "int"
        else:
            types[name] = "float"
    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {n}"]
    header += [f"property {types[name]} {name}" for name in names]
    header.append("end_header")
    tmp_fd, tmp_path = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(tmp_fd, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            if binary:
                dtype = np.dtype([(name, _PLY_TYPES[types[name]][0]) for name in names])
                rec = np.empty(n, dtype=dtype)
                for name in names:
                    rec[name] = cols[name]
                fh.write(rec.tobytes())
            else:
                arr = np.stack([np.asarray(cols[name], dtype=np.float64)
                                for name in names], axis=1)
                for row in arr:
                    fh.write((" ".join(format(v, ".17g") for v in row) + "\n").encode("ascii"))
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_scene(path, intensity_range: Optional[float] = None) -> PointCloud:
    """Load a scene as a PointCloud in the scene frame.

    Intensity is rescaled to [0,1] from the declared range (default: taken as
    already normalized for generated files, 65535 for converted LiDAR files
    whose values exceed 1).
    """
    path = Path(path)
    if path.suffix == ".ply":
        cols = load_ply(path)
    else:
        with open(path) as fh:
            header = fh.readline().split()
            unknown = [h for h in header if h not in KNOWN_COLUMNS]
            if unknown:
                warnings.warn(f"{path}: ignoring unknown columns {unknown}")
            data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
        cols = {name: data[:, i] for i, name in enumerate(header)
                if name in KNOWN_COLUMNS}
    if intensity_range is None:
        intensity = cols.get("intensity")
        intensity_range = 65535.0 if intensity is not None and np.nanmax(intensity) > 1.0 else 1.0
    return _cloud_from_columns(cols, path, intensity_range)


def save_scene(path, cloud: PointCloud, binary: bool = True):
    path = Path(path)
    cols = _cloud_columns(cloud)
    if path.suffix == ".ply":
        save_ply(path, cols, binary=binary, color_uint8=False)
    else:
        names = list(cols)
        arr = np.stack([np.asarray(cols[n], dtype=np.float64) for n in names], axis=1)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w") as fh:
            fh.write(" ".join(names) + "\n")
            np.savetxt(fh, arr, fmt="%.17g")
        os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class ObjectArchetype:
    shape: str                       # cone | box | cylinder | composite
    count: tuple = (5, 10)           # inclusive range
    scale: tuple = (2.0, 4.0)        # object footprint in meters
    intensity: float = 0.5
    class_id: int = 1
    points: int = 400

    def __post_init__(self):
        if self.shape not in ("cone", "box", "cylinder", "composite"):
            raise ValueError(f"unknown shape {self.shape!r}")


@dataclass
class SynthSpec:
    extent_m: float = 64.0
    roughness: float = 0.5           # terrain noise amplitude in meters
    ground_density: float = 12.0     # points per square meter
    ground_intensity: float = 0.2
    ground_class: int = 0
    min_separation: float = 1.0
    objects: List[ObjectArchetype] = field(default_factory=list)
    seed: int = 0


def _terrain_height(xy: np.ndarray, extent: float, roughness: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Smooth random elevation field: a few low-frequency sinusoids."""
    h = np.zeros(len(xy))
    for _ in range(4):
        freq = rng.uniform(0.5, 2.0) * 2 * np.pi / extent
        phase = rng.uniform(0, 2 * np.pi, size=2)
        direction = rng.normal(size=2)
        direction /= np.linalg.norm(direction)
        h += np.sin(xy @ direction * freq + phase[0]) * rng.uniform(0.3, 1.0)
    scale = h.std()
    return h / scale * roughness if scale > 0 else h


def _object_points(shape: str, size: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Surface samples of one object, base centered at the origin, z up."""
    u = rng.random(n)
    theta = rng.uniform(0, 2 * np.pi, n)
    if shape == "cone":
        height = size * 1.6
        r = (1.0 - u) * size / 2
        return np.stack([r * np.cos(theta), r * np.sin(theta), u * height], axis=1)
    if shape == "cylinder":
        height = size * 1.2
        r = size / 2
        return np.stack([r * np.cos(theta), r * np.sin(theta), u * height], axis=1)
    if shape == "box":
        height = size * 0.8
        pts = rng.uniform(-0.5, 0.5, size=(n, 3))
        face = rng.integers(0, 5, n)          # 4 walls + roof, no floor
        pts[face == 0, 0] = 0.5
        pts[face == 1, 0] = -0.5
        pts[face == 2, 1] = 0.5
        pts[face == 3, 1] = -0.5
        pts[face == 4, 2] = 0.5
        return pts * np.array([size, size, height]) + np.array([0, 0, height / 2])
    if shape == "composite":                 # box body + cone roof
        nb = n // 2
        body = _object_points("box", size, nb, rng)
        roof = _object_points("cone", size, n - nb, rng)
        roof[:, 2] += size * 0.8
        return np.concatenate([body, roof])
    raise ValueError(shape)


@dataclass
class PlacedObject:
    shape: str
    center: np.ndarray       # (2,) horizontal position
    size: float
    ground_z: float
    class_id: int
    instance: int


@dataclass
class SceneLayout:
    """Ground-truth construction of a generated scene: terrain samples plus
    the pose of every planted object."""
    ground_xy: np.ndarray
    ground_z: np.ndarray
    objects: List[PlacedObject]


def generate_synthetic_scene(spec: SynthSpec, return_layout: bool = False):
    """Rough terrain plus planted labeled object instances, deterministic per
    seed. Every point carries class and instance labels (instance 0 is the
    terrain)."""
    rng = np.random.default_rng(spec.seed)
    extent = spec.extent_m
    n_ground = int(spec.ground_density * extent * extent)
    gxy = rng.uniform(0, extent, size=(n_ground, 2))
    gz = _terrain_height(gxy, extent, spec.roughness, rng)
    positions = [np.concatenate([gxy, gz[:, None]], axis=1)]
    intensity = [np.full(n_ground, spec.ground_intensity)]
    classes = [np.full(n_ground, spec.ground_class, dtype=np.int64)]
    instances = [np.zeros(n_ground, dtype=np.int64)]

    placed: list = []
    layout_objects: list = []
    next_instance = 1
    for arch in spec.objects:
        lo, hi = arch.count
        count = int(rng.integers(lo, hi + 1))
        for _ in range(count):
            size = float(rng.uniform(*arch.scale))
            for attempt in range(1000):
                center = rng.uniform(size, extent - size, size=2)
                if all(np.linalg.norm(center - c) >= (size + s) / 2 + spec.min_separation
                       for c, s in placed):
                    break
            else:
                raise RuntimeError("infeasible object placement after 1000 attempts")
            placed.append((center, size))
            ground_level = _local_ground(gxy, gz, center)
            layout_objects.append(PlacedObject(
                shape=arch.shape, center=center.copy(), size=size,
                ground_z=ground_level, class_id=arch.class_id,
                instance=next_instance))
            pts = _object_points(arch.shape, size, arch.points, rng)
            pts = pts + np.array([center[0], center[1], 0.0])
            pts[:, 2] += ground_level  # sit on the terrain
            positions.append(pts)
            n = len(pts)
            jitter = rng.normal(0, 0.02, n)
            intensity.append(np.clip(arch.intensity + jitter, 0.0, 1.0))
            classes.append(np.full(n, arch.class_id, dtype=np.int64))
            instances.append(np.full(n, next_instance, dtype=np.int64))
            next_instance += 1
    cloud = PointCloud(
        positions=np.concatenate(positions),
        intensity=np.clip(np.concatenate(intensity), 0.0, 1.0),
        class_label=np.concatenate(classes),
        instance_label=np.concatenate(instances),
    )
    if return_layout:
        return cloud, SceneLayout(ground_xy=gxy, ground_z=gz,
                                  objects=layout_objects)
    return cloud


def _local_ground(gxy: np.ndarray, gz: np.ndarray, center: np.ndarray) -> float:
    d2 = ((gxy - center[None, :]) ** 2).sum(axis=1)
    near = np.argsort(d2)[:8]
    return float(gz[near].mean())


# ---------------------------------------------------------------------------
# Config files (TOML, flat sections mirroring the dataclass fields)
# ---------------------------------------------------------------------------

try:
    from tomllib import load as _toml_load
except ModuleNotFoundError:          # Python < 3.11
    from tomli import load as _toml_load


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)}")


def _emit_section(fh, name: str, mapping: dict):
    fh.write(f"[{name}]\n")
    for key, value in mapping.items():
        fh.write(f"{key} = {_toml_value(value)}\n")
    fh.write("\n")


def save_train_config(path, config: TrainConfig):
    train = {k: v for k, v in dataclasses.asdict(config).items()
             if k not in ("convergence", "weights", "model")}
    with open(path, "w") as fh:
        _emit_section(fh, "train", train)
        _emit_section(fh, "train.convergence", dataclasses.asdict(config.convergence))
        _emit_section(fh, "weights", dataclasses.asdict(config.weights))
        _emit_section(fh, "model", dataclasses.asdict(config.model))


def load_train_config(path) -> TrainConfig:
    with open(path, "rb") as fh:
        doc = _toml_load(fh)
    train = dict(doc.get("train", {}))
    conv = train.pop("convergence", {})
    model = dict(doc.get("model", {}))
    for key in ("scale_bounds", "proto_init_half_extent"):
        if key in model:
            model[key] = tuple(model[key])
    return TrainConfig(
        **train,
        convergence=ConvergenceConfig(**conv),
        weights=LossWeights(**doc.get("weights", {})),
        model=ModelConfig(**model),
    )


def save_synth_spec(path, spec: SynthSpec):
    top = {k: v for k, v in dataclasses.asdict(spec).items() if k != "objects"}
    with open(path, "w") as fh:
        _emit_section(fh, "terrain", top)
        for obj in spec.objects:
            fh.write("[[objects]]\n")
            for key, value in dataclasses.asdict(obj).items():
                fh.write(f"{key} = {_toml_value(value)}\n")
            fh.write("\n")


def load_synth_spec(path) -> SynthSpec:
    with open(path, "rb") as fh:
        doc = _toml_load(fh)
    objects = []
    for obj in doc.get("objects", []):
        for key in ("count", "scale"):
            if key in obj:
                obj[key] = tuple(obj[key])
        objects.append(ObjectArchetype(**obj))
    return SynthSpec(**doc.get("terrain", {}), objects=objects)


# ---------------------------------------------------------------------------
# Decomposition export
# ---------------------------------------------------------------------------

def color_table(ids: np.ndarray, seed: int = 0) -> np.ndarray:
    """Stable random color per id (N, 3) uint8; id -1 maps to black."""
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros((len(ids), 3), dtype=np.uint8)
    for uid in np.unique(ids):
        if uid < 0:
            continue
        rgb = np.random.default_rng(seed * 100003 + int(uid)).integers(40, 256, 3)
        out[ids == uid] = rgb.astype(np.uint8)
    return out


def export_decomposition(patches, labels: np.ndarray, model, out_dir,
                         report: Optional[dict] = None, seed: int = 0):
    """Write the reconstruction / semantic / instance / prototypes PLY files
    plus the JSON report into ``out_dir``."""
    from .evaluation import semantic_segmentation, instance_segmentation

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rec_pos, rec_proto, rec_inten = [], [], []
    for pd in patches:
        for sd in pd.decomposition.slots:
            rec_pos.append(pd.norm.to_scene(sd.points.copy()))
            rec_proto.append(np.full(len(sd.points), sd.prototype, dtype=np.int64))
            rec_inten.append(np.full(len(sd.points), sd.intensity))
    if rec_pos:
        pos = np.concatenate(rec_pos)
        proto_id = np.concatenate(rec_proto)
        color = color_table(proto_id, seed)
        save_ply(out_dir / "reconstruction.ply", {
            "x": pos[:, 0], "y": pos[:, 1], "z": pos[:, 2],
            "intensity": np.concatenate(rec_inten),
            "red": color[:, 0], "green": color[:, 1], "blue": color[:, 2],
            "class": proto_id})

    scene_pos = np.concatenate([pd.norm.to_scene(pd.patch.positions.copy())
                                for pd in patches])
    sem = semantic_segmentation(model, patches, labels)
    color = color_table(sem, seed + 1)
    save_ply(out_dir / "semantic.ply", {
        "x": scene_pos[:, 0], "y": scene_pos[:, 1], "z": scene_pos[:, 2],
        "red": color[:, 0], "green": color[:, 1], "blue": color[:, 2],
        "class": sem})

    inst = instance_segmentation(patches, set(range(model.config.num_prototypes)))
    color = color_table(inst, seed + 2)
    save_ply(out_dir / "instance.ply", {
        "x": scene_pos[:, 0], "y": scene_pos[:, 1], "z": scene_pos[:, 2],
        "red": color[:, 0], "green": color[:, 1], "blue": color[:, 2],
        "instance": inst})

    import torch
    with torch.no_grad():
        proto = model.prototypes.scaled_points(model.stage).double().numpy()
        inten = model.prototypes.intensity.double().numpy()
    k, p, _ = proto.shape
    flat = proto.reshape(-1, 3)
    pid = np.repeat(np.arange(k), p)
    color = color_table(pid, seed)
    save_ply(out_dir / "prototypes.ply", {
        "x": flat[:, 0], "y": flat[:, 1], "z": flat[:, 2],
        "intensity": np.repeat(inten, p),
        "red": color[:, 0], "green": color[:, 1], "blue": color[:, 2],
        "class": pid})

    if report is not None:
        tmp = out_dir / "report.json.tmp"
        tmp.write_text(json.dumps(report, indent=2, sort_keys=True))
        os.replace(tmp, out_dir / "report.json")
