"""Multi-task training objective: Dice + masked Smooth-L1 terms.

The segmentation map is scored with soft Dice over non-ignored pixels; the
three offset maps use Smooth-L1 restricted to ground-truth TCL pixels
(offsets carry no supervision elsewhere).  The total is the weighted sum
with default weights {1.0, 0.5, 0.5, 1.0}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    l2: float = 0.5
    l3: float = 0.5
    l4: float = 1.0

    def __post_init__(self):
        if min(self.l1, self.l2, self.l3, self.l4) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    tcl: float
    tco: float
    tvo: float
    tbo: float
    total: float


def dice_loss(pred: np.ndarray, gt: np.ndarray, ignore: np.ndarray | None = None):
    """Soft Dice loss and its gradient w.r.t. the prediction.

    1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps) over non-ignored pixels.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    if ignore is not None:
        ignore = np.asarray(ignore, dtype=np.float64)
        if ignore.shape != pred.shape:
            raise ShapeError(f"ignore shape {ignore.shape} != pred shape {pred.shape}")
        keep = ignore < 0.5
    else:
        keep = np.ones_like(pred, dtype=bool)
    p = np.where(keep, pred, 0.0)
    g = np.where(keep, gt, 0.0)
    inter = float(np.sum(p * g))
    denom = float(np.sum(p * p) + np.sum(g * g)) + EPS
    loss = 1.0 - 2.0 * inter / denom
    grad = np.where(keep, (-2.0 * g * denom + 2.0 * inter * 2.0 * p) / (denom * denom), 0.0)
    return loss, grad


def smooth_l1(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray):
    """Masked Smooth-L1 loss and gradient w.r.t. the prediction.

    Per element: 0.5 d^2 for |d| < 1 else |d| - 0.5, summed over masked
    pixels and all channels, normalized by (masked pixel count x channels
    + eps).  An empty mask yields loss 0 with zero gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    if pred.ndim != 3:
        raise ShapeError(f"expected (H, W, C) maps, got {pred.shape}")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape[:2] != pred.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not align with {pred.shape}")
    m = (mask >= 0.5).reshape(mask.shape[0], mask.shape[1], -1)[:, :, :1]
    n_masked = int(np.count_nonzero(m))
    channels = pred.shape[-1]
    if n_masked == 0:
        return 0.0, np.zeros_like(pred)
    d = pred - gt
    quad = np.abs(d) < 1.0
    per_elem = np.where(quad, 0.5 * d * d, np.abs(d) - 0.5)
    norm = n_masked * channels + EPS
    loss = float(np.sum(per_elem * m)) / norm
    grad = np.where(quad, d, np.sign(d)) * m / norm
    return loss, grad


def total_loss(pred, gt, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted multi-task total over two MapBundle-shaped containers.

    The TCL term uses the ground-truth ignore mask; the regression terms
    are masked by the ground-truth TCL.
    """
    l_tcl, _ = dice_loss(pred.tcl, gt.tcl, gt.ignore)
    mask = gt.tcl
    l_tco, _ = smooth_l1(pred.tco, gt.tco, mask)
    l_tvo, _ = smooth_l1(pred.tvo, gt.tvo, mask)
    l_tbo, _ = smooth_l1(pred.tbo, gt.tbo, mask)
    total = (
        weights.l1 * l_tcl + weights.l2 * l_tco + weights.l3 * l_tvo + weights.l4 * l_tbo
    )
    return LossBreakdown(tcl=l_tcl, tco=l_tco, tvo=l_tvo, tbo=l_tbo, total=total)
