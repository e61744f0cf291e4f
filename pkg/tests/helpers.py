"""Shared construction helpers for loss/model tests."""
import numpy as np
import torch

from protoscene.model import CandidateSet


def random_candidate_set(rng, s, k, p, n, with_intensity=True, spread=1.2,
                         dtype=torch.float64):
    """A CandidateSet with arbitrary probabilities/clouds plus the matching
    input patch tensors, for direct loss evaluation."""
    logits = rng.normal(size=(1, s, k + 1))
    probs = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    alpha = 1.0 - probs[..., 0]
    beta = probs[..., 1:]
    candidates = rng.uniform(-spread, spread, size=(1, s, k, p, 3))
    translation = rng.uniform(-1.5, 1.5, size=(1, s, 3))
    cand = CandidateSet(
        alpha=torch.tensor(alpha, dtype=dtype),
        beta=torch.tensor(beta, dtype=dtype),
        scale=torch.ones(1, s, 3, dtype=dtype),
        tilt_y=torch.zeros(1, s, dtype=dtype),
        rot_z=torch.zeros(1, s, dtype=dtype),
        translation=torch.tensor(translation, dtype=dtype),
        candidates=torch.tensor(candidates, dtype=dtype),
        proto_intensity=torch.tensor(rng.random(k), dtype=dtype) if with_intensity else None,
    )
    x = rng.uniform(-1, 1, size=(n, 3))
    intensity = rng.random(n) if with_intensity else None
    xt = torch.tensor(x, dtype=dtype)
    it = torch.tensor(intensity, dtype=dtype) if with_intensity else None
    return cand, xt, it


def numpy_loss_space(cand: CandidateSet, x: np.ndarray, intensity):
    """Independent scalar recomputation of loss-space inputs/candidates.

    Returns (x_loss (N,D), y_loss (S,K,P,D), in_extent_mask (S,K,P)).
    """
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi - lo > 1e-12, hi - lo, 1.0)
    xl = (x - lo) / span
    y = cand.candidates[0].double().numpy()
    yl = (y - lo) / span
    if intensity is not None:
        xl = np.concatenate([xl, 0.1 * intensity[:, None]], axis=1)
        s, k, p, _ = y.shape
        yi = np.broadcast_to(
            cand.proto_intensity.double().numpy()[None, :, None, None], (s, k, p, 1))
        yl = np.concatenate([yl, 0.1 * yi], axis=-1)
    mask = (np.abs(y[..., 0]) <= 1.0) & (np.abs(y[..., 1]) <= 1.0)
    return xl, yl, mask


def numpy_dxy(xl: np.ndarray, yl: np.ndarray) -> np.ndarray:
    """d(x, Y_s^k) by explicit loops: (N, S, K)."""
    n = len(xl)
    s, k = yl.shape[0], yl.shape[1]
    out = np.empty((n, s, k))
    for i in range(n):
        for si in range(s):
            for ki in range(k):
                out[i, si, ki] = np.min(((yl[si, ki] - xl[i][None, :]) ** 2).sum(axis=1))
    return out
