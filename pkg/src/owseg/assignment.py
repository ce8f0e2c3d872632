"""Prediction-to-ground-truth assignment.

Builds the combined matching cost (classification + L1 + GIoU), solves the
exact one-to-one assignment with a Hungarian solver, and selects contrastive
positives / hard negatives per ground truth by ascending cost (SimOTA-style,
optionally with dynamic per-gt k from summed IoUs).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CENTER, CORNER, box_convert, giou_matrix

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


@dataclass
class AssignConfig:
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    k1: int = 10
    k2: int = 100
    dynamic_k: bool = False

    def __post_init__(self):
        if not self.k2 > self.k1 >= 1:
            raise ValueError(f"AssignConfig requires k2 > k1 >= 1, got k1={self.k1} k2={self.k2}")


@dataclass
class CostMatrix:
    """Per-component and combined cost, rows = predictions, cols = ground truths."""
    cls: np.ndarray
    l1: np.ndarray
    giou: np.ndarray
    combined: np.ndarray

    @property
    def shape(self):
        return self.combined.shape


@dataclass
class MatchResult:
    pairs: list  # (prediction index, ground-truth index), sorted by gt index
    unmatched_predictions: list

    def pred_for_gt(self):
        return {g: p for p, g in self.pairs}


@dataclass
class SampleSelection:
    """Per ground truth: positive indices K+ and hard-negative indices K-."""
    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)


def _focal_cost(fg_logits):
    """Focal-style classification cost on the foreground logit (per prediction)."""
    x = np.asarray(fg_logits, dtype=np.float64).reshape(-1)
    softplus = lambda t: np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))
    p = 1.0 / (1.0 + np.exp(-x))
    pos = FOCAL_ALPHA * (1.0 - p) ** FOCAL_GAMMA * softplus(-x)
    neg = (1.0 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * softplus(x)
    return pos - neg


def build_cost(fg_logits, pred_boxes, gt_boxes, cfg):
    """Cost matrix between predictions and ground truths.

    ``pred_boxes`` / ``gt_boxes`` are center-form normalized. The class cost
    is column-constant (class-agnostic single foreground class); the L1 cost
    is the mean absolute difference of the four coordinates; the GIoU cost is
    the negated generalized IoU.
    """
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(pred_boxes)
    m = len(gt_boxes)
    if n == 0:
        raise ValueError("build_cost: need at least one prediction")
    cls = np.tile(_focal_cost(fg_logits)[:, None], (1, m))
    if m == 0:
        empty = np.zeros((n, 0))
        return CostMatrix(cls=empty, l1=empty.copy(), giou=empty.copy(), combined=empty.copy())
    l1 = np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).mean(axis=-1)
    g = -giou_matrix(box_convert(pred_boxes, CENTER, CORNER),
                     box_convert(gt_boxes, CENTER, CORNER))
    combined = cfg.lambda_cls * cls + cfg.lambda_l1 * l1 + cfg.lambda_giou * g
    return CostMatrix(cls=cls, l1=l1, giou=g, combined=combined)


def _solve_rows(cost):
    """Assign every row of an (n, m) matrix, n <= m, minimizing total cost.

    Shortest-augmenting-path Hungarian with potentials, O(n^2 m). Returns
    row -> column indices.
    """
    n, m = cost.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = cost[i0 - 1]
            free = ~used[1:]
            cur = row - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assignment = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            assignment[p[j] - 1] = j - 1
    return assignment


def hungarian(costs):
    """Exact minimum-cost one-to-one assignment.

    Accepts a CostMatrix or a raw (N_pred, M_gt) array; matches
    min(N, M) pairs minimizing total combined cost.
    """
    c = costs.combined if isinstance(costs, CostMatrix) else np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"hungarian: expected 2-D cost matrix, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("hungarian: cost matrix contains non-finite entries")
    n, m = c.shape
    if n == 0 or m == 0:
        return MatchResult(pairs=[], unmatched_predictions=list(range(n)))
    if m <= n:
        gt_to_pred = _solve_rows(c.T)  # rows = gts
        pairs = [(int(p), int(g)) for g, p in enumerate(gt_to_pred)]
    else:
        pred_to_gt = _solve_rows(c)
        pairs = [(int(p), int(g)) for p, g in enumerate(pred_to_gt)]
    pairs.sort(key=lambda pg: pg[1])
    matched_preds = {p for p, _ in pairs}
    unmatched = [i for i in range(n) if i not in matched_preds]
    return MatchResult(pairs=pairs, unmatched_predictions=unmatched)


def best_match_for_queue(costs):
    """Hungarian-matched prediction index per ground truth.

    Returns {gt index -> prediction index}; when there are more ground
    truths than predictions the unmatched ones are omitted.
    """
    return hungarian(costs).pred_for_gt()


def simota_select(costs, ious, cfg):
    """Pick contrastive positives and hard negatives per ground truth.

    Predictions are ranked by ascending combined cost (ties: lower index);
    the first k1 are positives, the next k2-k1 hard negatives. With
    ``cfg.dynamic_k``, per-gt k1/k2 are the rounded sums of the top-10 /
    top-100 IoU values, clamped to [1, cfg.k1] and [k1+1, cfg.k2].
    """
    c = costs.combined if isinstance(costs, CostMatrix) else np.asarray(costs, dtype=np.float64)
    ious = np.asarray(ious, dtype=np.float64)
    if c.shape != ious.shape:
        raise ValueError(f"simota_select: cost {c.shape} and iou {ious.shape} shapes differ")
    n, m = c.shape
    sel = SampleSelection()
    for j in range(m):
        if cfg.dynamic_k:
            col = np.sort(ious[:, j])[::-1]
            k1 = int(np.clip(round(col[:10].sum()), 1, cfg.k1))
            k2 = int(np.clip(round(col[:100].sum()), k1 + 1, cfg.k2))
        else:
            k1, k2 = cfg.k1, cfg.k2
        order = np.argsort(c[:, j], kind="stable")
        k1 = min(k1, n)
        k2 = min(k2, n)
        sel.positives.append(order[:k1].astype(int).tolist())
        sel.negatives.append(order[k1:k2].astype(int).tolist())
    return sel
