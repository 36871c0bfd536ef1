"""Training losses (combined sigmoid cross-entropy, soft Dice, contrastive)
and evaluation metrics (Dice coefficient, normalized surface distance at a mm
tolerance).

Surface extraction uses the 6-connectivity erosion difference with outside-
volume treated as background; surface distances are exact brute-force nearest
neighbours in millimetres, which is correct by construction at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .textbridge import contrastive_loss

DICE_SMOOTH = 1e-5


@dataclass
class LossWeights:
    w_bce: float = 1.0
    w_dice: float = 1.0
    w_contrast: float = 1.0

    def __post_init__(self):
        if min(self.w_bce, self.w_dice, self.w_contrast) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class SurfaceSpec:
    tolerance_mm: float = 2.0
    spacing_mm: tuple = (1.5, 1.5, 1.5)

    def __post_init__(self):
        if self.tolerance_mm <= 0:
            raise ValueError("tolerance must be positive")


def _check_binary(arr):
    if not np.all(np.isin(np.unique(arr), (0.0, 1.0))):
        raise ValueError("target must be binary")


def bce_loss(logits, target) -> Tensor:
    """Stabilized sigmoid cross-entropy, mean reduction."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape} vs target {target.shape}")
    _check_binary(target)
    elementwise = T.relu(logits) - logits * Tensor(target.astype(logits.dtype.type)) + T.softplus(-T.tabs(logits))
    return T.tmean(elementwise)


def dice_loss(logits, target) -> Tensor:
    """1 - soft Dice on sigmoid probabilities, averaged over batch and class.

    Smoothing in numerator and denominator keeps the empty-empty case at loss
    zero. Value lies in [0, 1].
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape} vs target {target.shape}")
    _check_binary(target)
    b, k = logits.shape[0], logits.shape[1]
    probs = T.sigmoid(logits)
    p = T.reshape(probs, (b * k, -1))
    t = np.reshape(target, (b * k, -1))
    inter = T.tsum(p * Tensor(t.astype(logits.dtype.type)), axis=1)
    sums = T.tsum(p, axis=1) + t.sum(axis=1)
    dice = (2.0 * inter + DICE_SMOOTH) / (sums + DICE_SMOOTH)
    return 1.0 - T.tmean(dice)


def total_loss(seg_logits, target, s, y, weights: LossWeights = LossWeights()):
    """Weighted sum of the three terms; unit weights reproduce the plain sum.

    Returns (total, parts dict of floats).
    """
    l_bce = bce_loss(seg_logits, target)
    l_dice = dice_loss(seg_logits, target)
    l_con = contrastive_loss(s, y)
    total = weights.w_bce * l_bce + weights.w_dice * l_dice + weights.w_contrast * l_con
    parts = {"bce": l_bce.item(), "dice": l_dice.item(), "contrast": l_con.item()}
    return total, parts


# -- evaluation metrics ----------------------------------------------------------------


def dice_metric(pred_mask, gt_mask) -> float:
    """2|P n G| / (|P| + |G|); empty-empty counts as 1, one-empty as 0."""
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    ps, gs = int(p.sum()), int(g.sum())
    if ps == 0 and gs == 0:
        return 1.0
    return 2.0 * float(np.logical_and(p, g).sum()) / (ps + gs)


def surface_voxels(mask) -> np.ndarray:
    """6-connectivity erosion difference; outside the volume is background."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 3:
        raise ValueError(f"expected a 3-d mask, got shape {m.shape}")
    padded = np.pad(m, 1)
    eroded = padded[1:-1, 1:-1, 1:-1].copy()
    eroded &= padded[:-2, 1:-1, 1:-1] & padded[2:, 1:-1, 1:-1]
    eroded &= padded[1:-1, :-2, 1:-1] & padded[1:-1, 2:, 1:-1]
    eroded &= padded[1:-1, 1:-1, :-2] & padded[1:-1, 1:-1, 2:]
    return m & ~eroded


def _surface_points_mm(mask, spacing):
    idx = np.argwhere(surface_voxels(mask))
    return idx.astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def _min_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each row of a, distance to the nearest row of b (brute force)."""
    # |a-b|^2 = |a|^2 + |b|^2 - 2 a.b, chunked over a to bound memory
    out = np.empty(len(a))
    b_sq = (b * b).sum(axis=1)
    chunk = max(1, 2_000_000 // max(1, len(b)))
    for lo in range(0, len(a), chunk):
        hi = min(len(a), lo + chunk)
        d2 = ((a[lo:hi] * a[lo:hi]).sum(axis=1)[:, None] + b_sq[None, :] - 2.0 * a[lo:hi] @ b.T)
        out[lo:hi] = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
    return out


def nsd_metric(pred_mask, gt_mask, spec: SurfaceSpec = SurfaceSpec()) -> float:
    """Fraction of combined surfaces within tolerance of the other surface.

    Empty-empty counts as 1, one-empty as 0 (no surface to agree with).
    """
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if spec.spacing_mm is None:
        raise ValueError("nsd_metric needs voxel spacing")
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0
    sp = _surface_points_mm(p, spec.spacing_mm)
    sg = _surface_points_mm(g, spec.spacing_mm)
    tau = spec.tolerance_mm
    hits = int((_min_dists(sp, sg) <= tau).sum()) + int((_min_dists(sg, sp) <= tau).sum())
    return hits / (len(sp) + len(sg))


def per_class_metrics(pred_masks, gt_masks, spec: SurfaceSpec = SurfaceSpec()):
    """Dice and NSD per class channel of (K, D, H, W) mask stacks."""
    pred_masks = np.asarray(pred_masks)
    gt_masks = np.asarray(gt_masks)
    if pred_masks.shape != gt_masks.shape:
        raise ValueError(f"shape mismatch: {pred_masks.shape} vs {gt_masks.shape}")
    rows = []
    for k in range(pred_masks.shape[0]):
        rows.append(
            {
                "dice": dice_metric(pred_masks[k], gt_masks[k]),
                "nsd": nsd_metric(pred_masks[k], gt_masks[k], spec),
            }
        )
    return rows
