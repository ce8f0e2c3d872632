"""Box and mask arithmetic: IoU, generalized IoU, dice, NMS, RLE.

Boxes are 4-vectors, either corner-form ``(x0, y0, x1, y1)`` or center-form
``(cx, cy, w, h)``, normalized to [0, 1]. All functions are pure and operate
on plain numpy arrays; vectorized pairwise variants take ``(N, 4)`` stacks.
"""

from __future__ import annotations

import numpy as np

CORNER = "corner"
CENTER = "center"


def box_convert(box, src, dst):
    """Convert between corner- and center-form; same-tag conversion is identity."""
    if src not in (CORNER, CENTER) or dst not in (CORNER, CENTER):
        raise ValueError(f"box_convert: unknown representation tag {src!r}/{dst!r}")
    box = np.asarray(box, dtype=np.float64)
    if src == dst:
        return box.copy()
    out = np.empty_like(box)
    if src == CENTER:
        cx, cy, w, h = box[..., 0], box[..., 1], box[..., 2], box[..., 3]
        out[..., 0] = cx - w / 2
        out[..., 1] = cy - h / 2
        out[..., 2] = cx + w / 2
        out[..., 3] = cy + h / 2
    else:
        x0, y0, x1, y1 = box[..., 0], box[..., 1], box[..., 2], box[..., 3]
        out[..., 0] = (x0 + x1) / 2
        out[..., 1] = (y0 + y1) / 2
        out[..., 2] = x1 - x0
        out[..., 3] = y1 - y0
    return out


def box_area(box):
    box = np.asarray(box, dtype=np.float64)
    return np.maximum(box[..., 2] - box[..., 0], 0) * np.maximum(box[..., 3] - box[..., 1], 0)


def box_iou(a, b):
    """IoU of two corner-form boxes; 0 when the union has zero area."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def giou(a, b):
    """Generalized IoU: IoU minus the enclosure not covered by the union."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iou = box_iou(a, b)
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    union = box_area(a) + box_area(b) - ix * iy
    ex = max(a[2], b[2]) - min(a[0], b[0])
    ey = max(a[3], b[3]) - min(a[1], b[1])
    enclosure = ex * ey
    if enclosure <= 0:
        return iou
    return iou - (enclosure - union) / enclosure


def box_iou_matrix(a, b):
    """Pairwise IoU for corner-form stacks a:(N,4), b:(M,4) -> (N,M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def giou_matrix(a, b):
    """Pairwise GIoU for corner-form stacks a:(N,4), b:(M,4) -> (N,M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    iou = np.zeros_like(inter)
    np.divide(inter, union, out=iou, where=union > 0)
    etl = np.minimum(a[:, None, :2], b[None, :, :2])
    ebr = np.maximum(a[:, None, 2:], b[None, :, 2:])
    ewh = np.clip(ebr - etl, 0, None)
    enc = ewh[..., 0] * ewh[..., 1]
    penalty = np.zeros_like(inter)
    np.divide(enc - union, enc, out=penalty, where=enc > 0)
    return iou - penalty


def _to_hard(mask):
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return mask
    return mask >= 0.5


def mask_iou(a, b):
    """IoU of two equal-size masks; soft inputs are thresholded at 0.5.

    Empty-vs-empty is defined as 1.0 so evaluation never divides by zero.
    """
    a, b = _to_hard(a), _to_hard(b)
    if a.shape != b.shape:
        raise ValueError(f"mask_iou: shapes differ {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def mask_iou_matrix(a, b):
    """Pairwise mask IoU for stacks a:(N,H,W), b:(M,H,W) -> (N,M)."""
    a = _to_hard(a).reshape(len(a), -1)
    b = _to_hard(b).reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise ValueError("mask_iou_matrix: mask sizes differ")
    af = a.astype(np.float64)
    bf = b.astype(np.float64)
    inter = af @ bf.T
    union = af.sum(axis=1)[:, None] + bf.sum(axis=1)[None, :] - inter
    out = np.ones_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def dice(a, b, smooth=1.0):
    """Dice overlap 2*sum(ab)/(sum a + sum b), smoothed; a may be soft."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dice: shapes differ {a.shape} vs {b.shape}")
    return float((2.0 * (a * b).sum() + smooth) / (a.sum() + b.sum() + smooth))


def nms_indices(boxes, scores, iou_threshold):
    """Greedy NMS on corner-form boxes; returns kept indices, descending score.

    Score ties are broken by lower index.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"nms: threshold must be in (0, 1], got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    ious = box_iou_matrix(boxes, boxes)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        suppressed |= ious[idx] > iou_threshold
        suppressed[idx] = True
    return keep


# run-length encoding ------------------------------------------------------

def rle_encode(mask):
    """Row-major RLE of a binary mask; counts alternate starting with zeros."""
    flat = _to_hard(mask).reshape(-1).astype(np.int8)
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return [int(c) for c in counts]


def rle_decode(counts, height, width):
    """Inverse of :func:`rle_encode`; returns a bool (height, width) mask."""
    total = sum(counts)
    if total != height * width:
        raise ValueError(
            f"rle_decode: counts sum to {total}, expected {height * width}")
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    val = False
    for c in counts:
        if val:
            flat[pos:pos + c] = True
        pos += c
        val = not val
    return flat.reshape(height, width)
