"""Everything downstream of a trained model: prototype labeling, semantic and
instance segmentation, counting error, greedy prototype selection, and the
k-means baseline."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch

from .geometry import PointCloud, chamfer_sym, to_loss_space, loss_space_bounds
from .losses import (coverage_closed_form, loss_acc_patch, loss_cov_patch,
                     point_candidate_distances, extent_mask, pairwise_sq,
                     _prep_patch)
from .model import SceneModel, Decomposition
from .nn_backend import nearest_sq
from .training import inference_grid


@dataclass
class PatchDecomposition:
    patch: PointCloud
    norm: object
    decomposition: Decomposition


def decompose_scene(model: SceneModel, scene: PointCloud,
                    patch_size_m: float) -> List[PatchDecomposition]:
    """Run inference over the non-overlapping grid of a scene."""
    out = []
    for patch, norm in inference_grid(scene, patch_size_m):
        decomp = model.infer(patch)
        out.append(PatchDecomposition(patch=patch, norm=norm, decomposition=decomp))
    return out


def label_prototypes(model: SceneModel, patches: List[PatchDecomposition],
                     num_classes: Optional[int] = None) -> np.ndarray:
    """Per-prototype-point class labels by majority vote, (K, P).

    For every active slot, each transformed prototype point votes the class
    of its nearest labeled input point; ties break to the lower class id and
    never-voted points get -1.
    """
    k = model.config.num_prototypes
    p = model.config.points_per_prototype
    votes: dict = {}
    any_labels = False
    for pd in patches:
        patch = pd.patch
        if patch.class_label is None:
            continue
        labeled = patch.class_label >= 0
        if not labeled.any():
            continue
        any_labels = True
        bounds = loss_space_bounds(patch)
        x = to_loss_space(patch, bounds=bounds)[labeled]
        classes = patch.class_label[labeled]
        for sd in pd.decomposition.slots:
            y = to_loss_space(PointCloud(sd.points, frame=patch.frame),
                              bounds=bounds,
                              intensity_override=np.full(p, sd.intensity))
            if x.shape[1] == 3:
                y = y[:, :3]
            _, idx = nearest_sq(y, x)
            for pp, cls in enumerate(classes[idx]):
                votes.setdefault((sd.prototype, pp), {})
                votes[(sd.prototype, pp)][int(cls)] = (
                    votes[(sd.prototype, pp)].get(int(cls), 0) + 1)
    if not any_labels:
        raise ValueError("scene carries no class labels")
    labels = np.full((k, p), -1, dtype=np.int64)
    for (ki, pi), counter in votes.items():
        best = max(sorted(counter), key=lambda c: counter[c])  # ties -> low id
        labels[ki, pi] = best
    return labels


def semantic_segmentation(model: SceneModel, patches: List[PatchDecomposition],
                          labels: np.ndarray) -> np.ndarray:
    """Per-point class for the whole scene, ordered patch by patch.

    Points in patches with an empty decomposition get -1.
    """
    out = []
    for pd in patches:
        decomp = pd.decomposition
        n = len(pd.patch)
        if decomp.empty:
            out.append(np.full(n, -1, dtype=np.int64))
            continue
        protos = np.array([sd.prototype for sd in decomp.slots])
        cls = labels[protos[decomp.point_slot], decomp.point_proto_point]
        out.append(cls)
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def scene_order_index(patches: List[PatchDecomposition], scene: PointCloud) -> np.ndarray:
    """Map patch-concatenated point order back to scene order."""
    xy = scene.positions[:, :2]
    lo = xy.min(axis=0)
    # reproduce the grid assignment used by inference_grid
    size = 2.0 * patches[0].norm.half_size
    cell = np.floor((xy - lo[None, :]) / size).astype(np.int64)
    ncols = int(cell[:, 1].max()) + 1
    flat = cell[:, 0] * ncols + cell[:, 1]
    order = []
    for tid in np.unique(flat):
        order.append(np.flatnonzero(flat == tid))
    return np.concatenate(order)


def miou(pred: np.ndarray, gt: np.ndarray) -> tuple[float, dict]:
    """Class-averaged IoU in percent, plus the per-class table.

    Unlabeled ground truth (-1) is excluded from both intersection and union.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("prediction/ground-truth length mismatch")
    mask = gt >= 0
    if not mask.any():
        raise ValueError("no labeled points")
    pred, gt = pred[mask], gt[mask]
    table = {}
    for cls in np.unique(gt):
        inter = int(np.sum((pred == cls) & (gt == cls)))
        union = int(np.sum((pred == cls) | (gt == cls)))
        table[int(cls)] = 100.0 * inter / union if union else 0.0
    return float(np.mean(list(table.values()))), table


def instance_segmentation(patches: List[PatchDecomposition],
                          target_prototypes: set) -> np.ndarray:
    """Per-point instance ids (patch-concatenated order); -1 outside targets.

    Each (patch, active slot) pair whose chosen prototype is in the target
    set becomes one globally unique instance.
    """
    out = []
    next_id = 0
    for pd in patches:
        decomp = pd.decomposition
        n = len(pd.patch)
        ids = np.full(n, -1, dtype=np.int64)
        if not decomp.empty:
            slot_ids = np.full(len(decomp.slots), -1, dtype=np.int64)
            for rank, sd in enumerate(decomp.slots):
                if sd.prototype in target_prototypes:
                    slot_ids[rank] = next_id
                    next_id += 1
            assigned = decomp.point_slot >= 0
            ids[assigned] = slot_ids[decomp.point_slot[assigned]]
        out.append(ids)
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def count_mre(predicted_counts, true_counts) -> float:
    """Mean relative counting error over zones, in percent."""
    predicted_counts = np.asarray(predicted_counts, dtype=np.float64)
    true_counts = np.asarray(true_counts, dtype=np.float64)
    if predicted_counts.shape != true_counts.shape:
        raise ValueError("count list length mismatch")
    keep = true_counts > 0
    if not keep.all():
        warnings.warn(f"excluding {int((~keep).sum())} zones with zero true count")
    if not keep.any():
        raise ValueError("no zones with positive true count")
    rel = np.abs(predicted_counts[keep] - true_counts[keep]) / true_counts[keep]
    return float(100.0 * rel.mean())


# ---------------------------------------------------------------------------
# Greedy prototype selection
# ---------------------------------------------------------------------------

@dataclass
class SelectionStep:
    removed: int
    relative_increase: float


@dataclass
class SelectionReport:
    kept: list
    steps: List[SelectionStep] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"kept": list(self.kept),
                "steps": [{"removed": s.removed,
                           "relative_increase": s.relative_increase}
                          for s in self.steps]}


@dataclass
class _PatchCache:
    beta: np.ndarray       # (S, K) raw probabilities
    alpha0: np.ndarray     # (S,) probability of the no-op entry = 1 - alpha
    dxy: np.ndarray        # (N, S, K)
    d_acc: np.ndarray      # (S, K) clipped per-candidate accuracy distances


def _cache_patches(model: SceneModel, scene: PointCloud, patch_size_m: float,
                   max_points: int = 4096, seed: int = 0) -> list[_PatchCache]:
    rng = np.random.default_rng(seed)
    caches = []
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for patch, _ in inference_grid(scene, patch_size_m):
            if len(patch) > max_points:
                patch = patch.select(np.sort(rng.choice(len(patch), max_points, replace=False)))
            cand = model.reconstruct([patch])
            x = torch.from_numpy(patch.positions).to(dtype)
            intens = (torch.from_numpy(patch.intensity).to(dtype)
                      if patch.intensity is not None and model.config.use_intensity else None)
            dxy = point_candidate_distances(cand, 0, x, intens)
            xl, yl = _prep_patch(cand, 0, x, intens)
            s, k, p, d = yl.shape
            mask = extent_mask(cand, 0).to(yl.dtype)
            d2 = pairwise_sq(yl.reshape(s * k, p, d), xl[None])
            dmin = d2.min(dim=-1).values.reshape(s, k, p)
            counts = mask.sum(-1)
            per_cand = (dmin * mask).sum(-1) / counts.clamp(min=1.0)
            per_cand = torch.where(counts > 0, per_cand, torch.zeros_like(per_cand))
            caches.append(_PatchCache(
                beta=cand.beta[0].double().numpy(),
                alpha0=1.0 - cand.alpha[0].double().numpy(),
                dxy=dxy.double().numpy(),
                d_acc=per_cand.double().numpy(),
            ))
    return caches


def _masked_reconstruction_loss(caches: list[_PatchCache], masked: set) -> float:
    """Mean accuracy + coverage over cached patches with the masked
    prototypes' probability mass renormalized out of the softmax."""
    total = 0.0
    for c in caches:
        s, k = c.beta.shape
        keep = np.array([j for j in range(k) if j not in masked])
        denom = c.alpha0 + c.beta[:, keep].sum(axis=1)        # (S,)
        denom = np.maximum(denom, 1e-12)
        beta = np.zeros_like(c.beta)
        beta[:, keep] = c.beta[:, keep] / denom[:, None]
        alpha = beta.sum(axis=1)
        acc = float((beta * c.d_acc).sum() / s)
        cov = float(coverage_closed_form(
            torch.from_numpy(alpha), torch.from_numpy(beta),
            torch.from_numpy(c.dxy)))
        total += acc + cov
    return total / max(len(caches), 1)


def select_prototypes(model: SceneModel, scene: PointCloud,
                      patch_size_m: Optional[float] = None,
                      threshold: float = 0.05,
                      relative_to_original: bool = False) -> SelectionReport:
    """Greedily drop prototypes whose masking barely raises the
    reconstruction loss (relative increase under the threshold)."""
    if patch_size_m is None:
        patch_size_m = model.config.patch_size_m
    caches = _cache_patches(model, scene, patch_size_m)
    k = model.config.num_prototypes
    masked: set = set()
    report = SelectionReport(kept=list(range(k)))
    baseline = _masked_reconstruction_loss(caches, masked)
    original = baseline
    while k - len(masked) > 1:
        candidates = [j for j in range(k) if j not in masked]
        losses = {j: _masked_reconstruction_loss(caches, masked | {j})
                  for j in candidates}
        best = min(candidates, key=lambda j: (losses[j], j))
        ref = original if relative_to_original else baseline
        increase = (losses[best] - ref) / max(abs(ref), 1e-12)
        if increase >= threshold:
            break
        masked.add(best)
        report.steps.append(SelectionStep(removed=best, relative_increase=float(increase)))
        baseline = losses[best]
    report.kept = [j for j in range(k) if j not in masked]
    return report


# ---------------------------------------------------------------------------
# k-means baseline
# ---------------------------------------------------------------------------

def kmeans_baseline(scene: PointCloud, k: int,
                    features: tuple = ("intensity", "elevation"),
                    seed: int = 0, max_iter: int = 50) -> tuple[np.ndarray, float, dict]:
    """Cluster standardized intensity/elevation features, propagate each
    cluster's majority ground-truth class, and report mIoU."""
    from sklearn.cluster import KMeans

    cols = []
    for f in features:
        if f == "intensity":
            if scene.intensity is None:
                raise ValueError("scene has no intensity channel")
            cols.append(scene.intensity)
        elif f == "elevation":
            cols.append(scene.positions[:, 2])
        else:
            raise ValueError(f"unknown feature {f!r}")
    feats = np.stack(cols, axis=1)
    if k > len(scene):
        raise ValueError("more clusters than points")
    std = feats.std(axis=0)
    feats = (feats - feats.mean(axis=0)) / np.where(std > 1e-12, std, 1.0)
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter,
                random_state=seed)
    assign = km.fit_predict(feats)
    if scene.class_label is None:
        raise ValueError("scene has no class labels")
    pred = np.full(len(scene), -1, dtype=np.int64)
    for c in range(k):
        in_c = assign == c
        gt = scene.class_label[in_c]
        gt = gt[gt >= 0]
        if len(gt):
            vals, counts = np.unique(gt, return_counts=True)
            pred[in_c] = vals[np.argmax(counts)]  # ties -> lower class id
    score, table = miou(pred, scene.class_label)
    return pred, score, table


def scene_chamfer(model: SceneModel, scene: PointCloud,
                  patch_size_m: Optional[float] = None,
                  max_points_per_patch: int = 20000, seed: int = 0) -> float:
    """Symmetric Chamfer distance between each patch and its inferred
    reconstruction (3D, patch frame), averaged over non-empty patches."""
    if patch_size_m is None:
        patch_size_m = model.config.patch_size_m
    rng = np.random.default_rng(seed)
    vals = []
    for patch, _ in inference_grid(scene, patch_size_m):
        if len(patch) > max_points_per_patch:
            patch = patch.select(np.sort(rng.choice(len(patch), max_points_per_patch, replace=False)))
        decomp = model.infer(patch)
        if decomp.empty:
            continue
        recon = np.concatenate([sd.points for sd in decomp.slots], axis=0)
        vals.append(chamfer_sym(patch.positions, recon))
    if not vals:
        raise ValueError("no non-empty decompositions")
    return float(np.mean(vals))
