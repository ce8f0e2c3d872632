"""Score fusion and post-processing into the final proposal set."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import CENTER, CORNER, box_convert, nms_indices, rle_decode, rle_encode

FUSION_GEOMETRIC = "geometric"
FUSION_IOU_ONLY = "iou-only"
FUSION_CLASS_ONLY = "class-only"
FUSION_MODES = (FUSION_GEOMETRIC, FUSION_IOU_ONLY, FUSION_CLASS_ONLY)


@dataclass
class Proposal:
    score: float
    box: np.ndarray            # corner-form, normalized
    mask: np.ndarray           # hard bool (H, W)
    cls_score: float | None
    box_iou_score: float | None
    mask_iou_score: float | None


def fuse_scores(c_c, c_b, c_m):
    """Geometric mean of the classification and IoU scores."""
    return float((c_c * c_b * c_m) ** (1.0 / 3.0))


def _fused_vector(mode, cls_p, biou_p, miou_p, n):
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
    if mode == FUSION_GEOMETRIC:
        if cls_p is None or biou_p is None or miou_p is None:
            raise ValueError("geometric fusion needs classification and both IoU scores")
        return (cls_p * biou_p * miou_p) ** (1.0 / 3.0)
    if mode == FUSION_IOU_ONLY:
        if biou_p is None or miou_p is None:
            raise ValueError("iou-only fusion needs both IoU scores")
        return np.sqrt(biou_p * miou_p)
    if cls_p is None:
        raise ValueError("class-only fusion needs the classification score")
    return cls_p.copy()


def postprocess(boxes_center, soft_masks, cls_p=None, biou_p=None, miou_p=None,
                nms_thr=0.7, top_k=100, fusion=FUSION_GEOMETRIC, mask_threshold=0.5):
    """Fuse scores, NMS, keep top-k: one image's proposals, descending score.

    ``boxes_center``: (Q, 4) center-form normalized; ``soft_masks``: (Q, H, W)
    probabilities; score vectors are per-query probabilities in [0, 1].
    """
    boxes_center = np.asarray(boxes_center, dtype=np.float64).reshape(-1, 4)
    q = len(boxes_center)
    fused = _fused_vector(fusion, cls_p, biou_p, miou_p, q)
    corner = box_convert(boxes_center, CENTER, CORNER)
    keep = nms_indices(corner, fused, nms_thr)[:top_k]
    out = []
    for i in keep:
        out.append(Proposal(
            score=float(fused[i]),
            box=corner[i].copy(),
            mask=np.asarray(soft_masks[i]) >= mask_threshold,
            cls_score=None if cls_p is None else float(cls_p[i]),
            box_iou_score=None if biou_p is None else float(biou_p[i]),
            mask_iou_score=None if miou_p is None else float(miou_p[i]),
        ))
    return out


# proposal files -----------------------------------------------------------

def write_proposals(path, proposals_by_image):
    """Line-delimited records, one proposal per line, grouped by image id."""
    with open(path, "w", encoding="utf-8") as f:
        for image_id in sorted(proposals_by_image):
            for p in proposals_by_image[image_id]:
                h, w = p.mask.shape
                rec = {
                    "image_id": image_id,
                    "score": p.score,
                    "cls_score": p.cls_score,
                    "box_iou_score": p.box_iou_score,
                    "mask_iou_score": p.mask_iou_score,
                    "box": [float(v) for v in p.box],
                    "mask": {"size": [h, w], "counts": rle_encode(p.mask)},
                }
                f.write(json.dumps(rec) + "\n")


def read_proposals(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: bad proposal record ({e})")
            mask = rle_decode(rec["mask"]["counts"], *rec["mask"]["size"])
            prop = Proposal(
                score=float(rec["score"]),
                box=np.asarray(rec["box"], dtype=np.float64),
                mask=mask,
                cls_score=rec.get("cls_score"),
                box_iou_score=rec.get("box_iou_score"),
                mask_iou_score=rec.get("mask_iou_score"),
            )
            out.setdefault(rec["image_id"], []).append(prop)
    return out
