"""Training objectives.

The reconstruction term is an expected Chamfer loss in two directions:
``loss_acc`` (candidates fit the input, weighted by joint choice
probabilities, with out-of-extent candidate points clipped) and ``loss_cov``
(every input point is covered by the nearest activated slot, in closed form
via slots sorted by conditional expected distance). Three usage regularizers
and a translation box penalty complete the objective.

Enumeration and Monte-Carlo oracles for the coverage loss live here too; the
tests pin the closed form against them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import CandidateSet

ALPHA_FLOOR = 1e-8
INTENSITY_LOSS_SCALE = 0.1


@dataclass
class LossWeights:
    lambda_act: float = 1e-4
    lambda_slot: float = 0.1
    lambda_proto: float = 0.1
    eps_slot: float = 0.1
    eps_proto: float = 0.1
    lambda_translate: float = 1.0

    def __post_init__(self):
        for name in ("lambda_act", "lambda_slot", "lambda_proto", "lambda_translate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("eps_slot", "eps_proto"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in (0, 1]")


@dataclass
class LossReport:
    acc: float
    cov: float
    act: float
    slot: float
    proto: float
    translate_reg: float
    total: float

    def to_dict(self) -> dict:
        return {"acc": self.acc, "cov": self.cov, "act": self.act,
                "slot": self.slot, "proto": self.proto,
                "translate_reg": self.translate_reg, "total": self.total}


def pairwise_sq(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared euclidean distances between the last-but-one dims of a and b."""
    diff = a.unsqueeze(-2) - b.unsqueeze(-3)
    return (diff * diff).sum(-1)


def candidate_loss_points(cand: CandidateSet, batch_index: int,
                          x_bounds: tuple) -> torch.Tensor:
    """Candidate clouds of one patch mapped to the input's loss space:
    (S, K, P, 3 or 4)."""
    lo, hi = x_bounds
    span = torch.where(hi - lo > 1e-12, hi - lo, torch.ones_like(hi))
    pts = (cand.candidates[batch_index] - lo) / span
    if cand.proto_intensity is not None:
        k, p = pts.shape[1], pts.shape[2]
        intens = cand.proto_intensity[None, :, None, None].expand(pts.shape[0], k, p, 1)
        pts = torch.cat([pts, intens * INTENSITY_LOSS_SCALE], dim=-1)
    return pts


def input_loss_points(x: torch.Tensor, intensity: torch.Tensor | None,
                      bounds: tuple) -> torch.Tensor:
    lo, hi = bounds
    span = torch.where(hi - lo > 1e-12, hi - lo, torch.ones_like(hi))
    pts = (x - lo) / span
    if intensity is not None:
        pts = torch.cat([pts, intensity[:, None] * INTENSITY_LOSS_SCALE], dim=-1)
    return pts


def patch_bounds(x: torch.Tensor) -> tuple:
    """Per-axis bounding box of the input patch (loss-space reference)."""
    return x.min(dim=0).values, x.max(dim=0).values


def extent_mask(cand: CandidateSet, batch_index: int) -> torch.Tensor:
    """(S, K, P) mask of candidate points inside the [-1,1]^2 horizontal
    extent of the patch frame (closed interval)."""
    xy = cand.candidates[batch_index][..., :2]
    return ((xy >= -1.0) & (xy <= 1.0)).all(dim=-1)


def _prep_patch(cand: CandidateSet, i: int, x: torch.Tensor,
                intensity: torch.Tensor | None):
    bounds = patch_bounds(x)
    xl = input_loss_points(x, intensity, bounds)
    yl = candidate_loss_points(cand, i, bounds)
    if intensity is None and yl.shape[-1] == 4:
        yl = yl[..., :3]
    return xl, yl


def loss_acc_patch(cand: CandidateSet, i: int, x: torch.Tensor,
                   intensity: torch.Tensor | None) -> torch.Tensor:
    """(1/S) sum_{s,k} beta * d(clipped candidate, X) for one patch."""
    xl, yl = _prep_patch(cand, i, x, intensity)
    s, k, p, _ = yl.shape
    mask = extent_mask(cand, i).to(yl.dtype)           # (S, K, P)
    d2 = pairwise_sq(yl.reshape(s * k, p, -1), xl[None])  # (S*K, P, N)
    dmin = d2.min(dim=-1).values.reshape(s, k, p)
    counts = mask.sum(-1)
    per_cand = (dmin * mask).sum(-1) / counts.clamp(min=1.0)
    per_cand = torch.where(counts > 0, per_cand, torch.zeros_like(per_cand))
    return (cand.beta[i] * per_cand).sum() / s


def point_candidate_distances(cand: CandidateSet, i: int, x: torch.Tensor,
                              intensity: torch.Tensor | None) -> torch.Tensor:
    """d(x, Y_s^k) for every input point and candidate: (N, S, K)."""
    xl, yl = _prep_patch(cand, i, x, intensity)
    s, k, p, d = yl.shape
    d2 = pairwise_sq(xl[None], yl.reshape(s * k, p, d))   # (S*K, N, P)
    return d2.min(dim=-1).values.reshape(s, k, -1).permute(2, 0, 1)


def coverage_closed_form(alpha: torch.Tensor, beta: torch.Tensor,
                         dxy: torch.Tensor) -> torch.Tensor:
    """Closed-form expected covering distance for one patch.

    ``alpha``: (S,), ``beta``: (S, K), ``dxy``: (N, S, K). For each input
    point, slots are sorted by conditional expected distance and each
    contributes its joint expected distance times the probability that all
    closer slots are inactive. The all-inactive event costs zero.
    """
    a = (beta[None] * dxy).sum(-1)                       # (N, S): Delta * alpha
    delta = a / alpha.clamp(min=ALPHA_FLOOR)[None]
    order = torch.argsort(delta, dim=1, stable=True)     # ties keep slot order
    a_sorted = torch.gather(a, 1, order)
    alpha_sorted = alpha[None].expand_as(delta).gather(1, order)
    survive = torch.cumprod(1.0 - alpha_sorted, dim=1)
    excl = torch.cat([torch.ones_like(survive[:, :1]), survive[:, :-1]], dim=1)
    return (a_sorted * excl).sum(1).mean()


def loss_cov_patch(cand: CandidateSet, i: int, x: torch.Tensor,
                   intensity: torch.Tensor | None) -> torch.Tensor:
    dxy = point_candidate_distances(cand, i, x, intensity)
    return coverage_closed_form(cand.alpha[i], cand.beta[i], dxy)


def loss_act(alpha: torch.Tensor) -> torch.Tensor:
    """Sum over slots of the batch-mean activation, (B, S) -> scalar."""
    return alpha.mean(dim=0).sum()


def loss_slot(alpha: torch.Tensor, eps_slot: float) -> torch.Tensor:
    """Reward every slot whose relative use reaches eps_slot."""
    mean = alpha.mean(dim=0)                             # (S,)
    total = mean.sum()
    if total.item() <= 0:
        return torch.zeros((), dtype=alpha.dtype)
    return -(torch.clamp(mean / total, max=eps_slot)).sum()


def loss_proto(alpha: torch.Tensor, beta: torch.Tensor, eps_proto: float) -> torch.Tensor:
    """Reward every prototype whose relative choice mass reaches eps_proto."""
    total = alpha.mean(dim=0).sum()
    if total.item() <= 0:
        return torch.zeros((), dtype=alpha.dtype)
    use = beta.sum(dim=1).mean(dim=0)                    # (K,)
    return -(torch.clamp(use / total, max=eps_proto)).sum()


def loss_translate_reg(translation: torch.Tensor) -> torch.Tensor:
    """Squared distance of each slot's horizontal translation to the
    [-1,1]^2 box, summed over slots and averaged over the batch."""
    xy = translation[..., :2]
    excess = torch.clamp(xy.abs() - 1.0, min=0.0)
    return (excess * excess).sum(dim=(-1, -2)).mean()


def total_loss(cand: CandidateSet, xs: list, intensities: list,
               weights: LossWeights) -> tuple[torch.Tensor, LossReport]:
    """Weighted objective over a batch of patches.

    ``xs``/``intensities`` are per-patch position tensors (N_i, 3) and
    optional intensity tensors (N_i,). Reconstruction terms are averaged over
    the batch; the usage regularizers are computed batch-wise.
    """
    b = cand.alpha.shape[0]
    if len(xs) != b:
        raise ValueError("batch size mismatch")
    acc = sum(loss_acc_patch(cand, i, xs[i], intensities[i]) for i in range(b)) / b
    cov = sum(loss_cov_patch(cand, i, xs[i], intensities[i]) for i in range(b)) / b
    act = loss_act(cand.alpha)
    slot = loss_slot(cand.alpha, weights.eps_slot)
    proto = loss_proto(cand.alpha, cand.beta, weights.eps_proto)
    treg = loss_translate_reg(cand.translation)
    total = (acc + cov + weights.lambda_act * act + weights.lambda_slot * slot
             + weights.lambda_proto * proto + weights.lambda_translate * treg)
    def val(t):
        return float(t.detach()) if torch.is_tensor(t) else float(t)

    report = LossReport(
        acc=val(acc), cov=val(cov), act=val(act), slot=val(slot),
        proto=val(proto), translate_reg=val(treg), total=val(total))
    return total, report


# ---------------------------------------------------------------------------
# Oracles (test references, independent scalar implementations)
# ---------------------------------------------------------------------------

def loss_cov_oracle(alpha: np.ndarray, beta: np.ndarray, dxy: np.ndarray,
                    mode: str = "enumerate", n_samples: int = 100000,
                    seed: int = 0) -> float:
    """Reference value of the coverage loss for one patch.

    ``enumerate`` sums over all 2^S activation subsets; for each subset the
    cost of a point is the smallest conditional expected distance
    Delta(x, s) = sum_k (beta/alpha) d(x, Y_s^k) among active slots (the
    expectation over the prototype draw of the covering slot), zero if no
    slot is active. ``montecarlo`` samples activations, takes the closest
    active slot by Delta, then samples that slot's prototype and pays the
    realized distance; its mean estimates the same quantity.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    dxy = np.asarray(dxy, dtype=np.float64)
    n, s, _ = dxy.shape
    safe_alpha = np.maximum(alpha, ALPHA_FLOOR)
    delta = np.einsum("sk,nsk->ns", beta, dxy) / safe_alpha[None, :]
    if mode == "enumerate":
        if s > 6:
            raise ValueError("enumeration limited to S <= 6")
        total = 0.0
        for pattern in range(1, 1 << s):
            active = [i for i in range(s) if pattern >> i & 1]
            prob = 1.0
            for i in range(s):
                prob *= alpha[i] if pattern >> i & 1 else (1.0 - alpha[i])
            if prob == 0.0:
                continue
            total += prob * np.min(delta[:, active], axis=1).sum()
        return float(total / n)
    if mode == "montecarlo":
        rng = np.random.default_rng(seed)
        active = rng.random((n_samples, s)) < alpha[None, :]
        cond_choice = beta / safe_alpha[:, None]
        k = beta.shape[1]
        sums = cond_choice.sum(axis=1, keepdims=True)
        cond_choice = np.where(sums > 0, cond_choice / np.maximum(sums, 1e-300),
                               np.full_like(cond_choice, 1.0 / k))
        protos = np.stack([rng.choice(k, size=n_samples, p=cond_choice[i])
                           for i in range(s)], axis=1)   # (n_samples, S)
        totals = np.zeros(n_samples)
        for x in range(n):
            masked = np.where(active, delta[x][None, :], np.inf)
            best = np.argmin(masked, axis=1)
            any_active = active.any(axis=1)
            d_pick = dxy[x, best, protos[np.arange(n_samples), best]]
            totals += np.where(any_active, d_pick, 0.0)
        return float(totals.mean() / n)
    raise ValueError(f"unknown mode {mode!r}")


def loss_acc_oracle(beta: np.ndarray, candidates: np.ndarray,
                    candidate_mask: np.ndarray, x: np.ndarray) -> float:
    """Scalar double-loop expansion of the accuracy loss for one patch.

    ``candidates``: (S, K, P, D) loss-space points; ``candidate_mask``:
    (S, K, P) in-extent flags; ``x``: (N, D) loss-space input.
    """
    s, k, p, _ = candidates.shape
    total = 0.0
    for si in range(s):
        for ki in range(k):
            kept = candidates[si, ki][candidate_mask[si, ki]]
            if len(kept) == 0:
                continue
            acc = 0.0
            for pt in kept:
                acc += np.min(((x - pt[None, :]) ** 2).sum(axis=1))
            total += beta[si, ki] * acc / len(kept)
    return float(total / s)
