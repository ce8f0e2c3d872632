"""Training loss terms and their weighted combination.

All losses return scalar Tensors ready for ``backward``. Targets are plain
numpy arrays (gradient-detached by construction); box inputs are center-form
normalized. Classification is class-agnostic: one foreground logit per query.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (Tensor, add, concat, div, mul, relu, reshape, sigmoid,
                     softplus, sub, tmax, tmin, tmean, tsum)


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    mask: float = 2.0
    dice: float = 5.0
    iou: float = 1.0
    con: float = 1.0

    def weight_of(self, term_name):
        """Weight for a term name; aux terms use the suffix after the dot."""
        base = term_name.split(".")[-1]
        if not hasattr(self, base):
            raise KeyError(f"no loss weight for term {term_name!r}")
        return float(getattr(self, base))


@dataclass
class LossReport:
    terms: dict
    weights: dict
    total: float
    total_tensor: Tensor = field(repr=False, default=None)

    def to_record(self, iteration=None):
        rec = {} if iteration is None else {"iteration": iteration}
        rec.update({k: round(v, 6) for k, v in self.terms.items()})
        rec["total"] = round(self.total, 6)
        return rec


def _zero_like(t):
    return Tensor(np.zeros((), dtype=t if isinstance(t, np.dtype) else np.float32))


def _bce_terms(logits, targets):
    """t * softplus(-x) + (1-t) * softplus(x), elementwise and stable."""
    t = np.asarray(targets, dtype=logits.dtype)
    return add(mul(t, softplus(-logits)), mul(1.0 - t, softplus(logits)))


def focal_loss(fg_logits, targets, gamma=2.0, balance=0.25):
    """Focal loss on foreground logits, normalized by positives (min 1)."""
    t = np.asarray(targets, dtype=fg_logits.dtype)
    p = sigmoid(fg_logits)
    pos = mul(mul(balance * t, (1.0 - p) ** gamma), softplus(-fg_logits))
    neg = mul(mul((1.0 - balance) * (1.0 - t), p ** gamma), softplus(fg_logits))
    n_pos = max(1.0, float(t.sum()))
    return mul(tsum(add(pos, neg)), 1.0 / n_pos)


def _tensor_abs(x):
    return add(relu(x), relu(-x))


def _corners(boxes_center):
    cx = boxes_center[:, 0:1]
    cy = boxes_center[:, 1:2]
    hw = mul(boxes_center[:, 2:3], 0.5)
    hh = mul(boxes_center[:, 3:4], 0.5)
    return sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)


def giou_pairs(pred_center, gt_center, eps=1e-7):
    """Differentiable GIoU for matched box pairs; inputs center-form (K, 4)."""
    px0, py0, px1, py1 = _corners(pred_center)
    gt = Tensor(np.asarray(gt_center, dtype=pred_center.dtype).reshape(-1, 4))
    gx0, gy0, gx1, gy1 = _corners(gt)
    iw = relu(sub(tmin(px1, gx1), tmax(px0, gx0)))
    ih = relu(sub(tmin(py1, gy1), tmax(py0, gy0)))
    inter = mul(iw, ih)
    area_p = mul(sub(px1, px0), sub(py1, py0))
    area_g = mul(sub(gx1, gx0), sub(gy1, gy0))
    union = sub(add(area_p, area_g), inter)
    iou = div(inter, add(union, eps))
    ew = sub(tmax(px1, gx1), tmin(px0, gx0))
    eh = sub(tmax(py1, gy1), tmin(py0, gy0))
    enc = mul(ew, eh)
    return sub(iou, div(sub(enc, union), add(enc, eps)))


def box_losses(pred_boxes, gt_boxes):
    """(L1, GIoU loss) over matched pairs.

    L1 sums the absolute error over the 4 coordinates and averages over
    pairs; the GIoU loss is mean(1 - giou).
    """
    if pred_boxes is None or pred_boxes.shape[0] == 0:
        z = Tensor(np.zeros(()))
        return z, z
    gt = np.asarray(gt_boxes, dtype=pred_boxes.dtype).reshape(-1, 4)
    k = gt.shape[0]
    l1 = mul(tsum(_tensor_abs(sub(pred_boxes, gt))), 1.0 / k)
    g_loss = tmean(sub(1.0, giou_pairs(pred_boxes, gt)))
    return l1, g_loss


def mask_losses(mask_logits, gt_masks, smooth=1.0):
    """(binary cross-entropy, dice loss) over matched mask pairs.

    ``mask_logits`` are pre-sigmoid (K, H, W); ``gt_masks`` are hard {0,1}.
    """
    if mask_logits is None or mask_logits.shape[0] == 0:
        z = Tensor(np.zeros(()))
        return z, z
    gt = np.asarray(gt_masks, dtype=mask_logits.dtype)
    if gt.shape != mask_logits.shape:
        raise ValueError(f"mask_losses: shapes differ {mask_logits.shape} vs {gt.shape}")
    bce = tmean(_bce_terms(mask_logits, gt))
    p = sigmoid(mask_logits)
    k = gt.shape[0]
    flat_p = reshape(p, (k, -1))
    flat_t = gt.reshape(k, -1)
    num = add(mul(tsum(mul(flat_p, flat_t), axis=1), 2.0), smooth)
    den = add(add(tsum(flat_p, axis=1), flat_t.sum(axis=1)), smooth)
    dice = div(num, den)
    return bce, tmean(sub(1.0, dice))


def iou_head_loss(logits, iou_targets):
    """BCE between sigmoid(logit) and a real-valued IoU target, mean over positives."""
    if logits is None or logits.shape[0] == 0:
        return Tensor(np.zeros(()))
    t = np.clip(np.asarray(iou_targets, dtype=logits.dtype), 0.0, 1.0)
    return tmean(_bce_terms(logits, t))


def total_loss(terms, weights):
    """Weighted sum of loss terms; returns a backward-ready LossReport.

    ``terms`` maps names to scalar Tensors; ``weights`` is a LossWeights or
    a name -> float mapping.
    """
    if not terms:
        raise ValueError("total_loss: no terms")
    w = {}
    for name in terms:
        w[name] = weights.weight_of(name) if isinstance(weights, LossWeights) else float(weights[name])
    total_t = None
    for name, t in terms.items():
        piece = mul(t, w[name])
        total_t = piece if total_t is None else add(total_t, piece)
    values = {name: float(t.data) for name, t in terms.items()}
    return LossReport(terms=values, weights=w, total=float(total_t.data),
                      total_tensor=total_t)
