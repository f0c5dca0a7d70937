"""Box geometry, greedy NMS, and the detection post-processing chain."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Largest allowed tw/th when decoding deltas, keeps exp() bounded.
SCALE_CLAMP = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class PostProcessConfig:
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    topk_per_image: int = 100

    def __post_init__(self):
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError(f"score_threshold must be in [0, 1], got {self.score_threshold}")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError(f"nms_iou must be in [0, 1], got {self.nms_iou}")
        if self.topk_per_image < 1:
            raise ValueError(f"topk_per_image must be >= 1, got {self.topk_per_image}")


@dataclass(frozen=True)
class Detection:
    """One emitted detection: (image, category, confidence, xyxy box)."""

    image_id: int
    category: str
    score: float
    box: tuple


def as_boxes(boxes) -> np.ndarray:
    """Coerce to a float64 (n, 4) array, enforcing strictly positive extent."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected boxes of shape (n, 4), got {arr.shape}")
    if not ((arr[:, 2] > arr[:, 0]) & (arr[:, 3] > arr[:, 1])).all():
        raise ValueError("box with non-positive extent")
    return arr


def _centers(boxes):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = boxes[:, 0] + 0.5 * w
    cy = boxes[:, 1] + 0.5 * h
    return cx, cy, w, h


def encode_deltas(gt, anchors) -> np.ndarray:
    """Encode gt boxes relative to anchors as (tx, ty, tw, th)."""
    squeeze = np.asarray(gt).ndim == 1
    g = as_boxes(gt)
    a = as_boxes(anchors)
    if g.shape != a.shape:
        raise ValueError(f"box count mismatch: {g.shape} vs {a.shape}")
    gcx, gcy, gw, gh = _centers(g)
    acx, acy, aw, ah = _centers(a)
    out = np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)],
        axis=1)
    return out[0] if squeeze else out


def decode_deltas(deltas, anchors) -> np.ndarray:
    """Apply (tx, ty, tw, th) deltas to anchors, clamping the log scales."""
    d = np.asarray(deltas, dtype=np.float64)
    squeeze = d.ndim == 1
    if squeeze:
        d = d[None, :]
    a = as_boxes(anchors)
    if d.shape != a.shape:
        raise ValueError(f"delta/anchor shape mismatch: {d.shape} vs {a.shape}")
    acx, acy, aw, ah = _centers(a)
    cx = d[:, 0] * aw + acx
    cy = d[:, 1] * ah + acy
    w = np.exp(np.minimum(d[:, 2], SCALE_CLAMP)) * aw
    h = np.exp(np.minimum(d[:, 3], SCALE_CLAMP)) * ah
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    return out[0] if squeeze else out


def iou(a, b) -> float:
    """Intersection over union of two xyxy boxes."""
    return float(iou_matrix(as_boxes(a), as_boxes(b))[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(0.0, x2 - x1) * np.maximum(0.0, y2 - y1)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def nms(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy NMS: returns kept indices in descending-score order.

    Score ties are broken toward the lower input index.  A candidate is
    suppressed when its IoU with any already-kept box exceeds the
    threshold strictly.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores length mismatch")
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for i in order:
        if kept and (iou_matrix(boxes[i:i + 1], boxes[kept])[0] > iou_threshold).any():
            continue
        kept.append(int(i))
    return np.asarray(kept, dtype=np.int64)


def postprocess(image_ids, scores, boxes, categories, cfg: PostProcessConfig):
    """Per-category score filtering and NMS, then per-image top-k pooling.

    `scores` is (n, k) over an emitting category set and `boxes` is the
    matching (n, k, 4) array of already-decoded boxes; the background slot
    is never passed here.  Filtering keeps scores strictly above the
    threshold; pooled ties are broken by category index then proposal
    index.  Returns (detections, consumed) where `consumed` holds the
    sorted indices of proposals contributing at least one kept detection.
    """
    image_ids = np.asarray(image_ids)
    scores = np.asarray(scores, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    n = len(image_ids)
    k = len(categories)
    if scores.shape != (n, k):
        raise ValueError(f"expected scores of shape {(n, k)}, got {scores.shape}")
    if boxes.shape != (n, k, 4):
        raise ValueError(f"expected boxes of shape {(n, k, 4)}, got {boxes.shape}")

    detections: list[Detection] = []
    consumed: set[int] = set()
    for img in np.unique(image_ids):
        in_image = np.flatnonzero(image_ids == img)
        entries = []
        for c in range(k):
            cand = in_image[scores[in_image, c] > cfg.score_threshold]
            if cand.size == 0:
                continue
            for j in nms(boxes[cand, c], scores[cand, c], cfg.nms_iou):
                prop = int(cand[j])
                entries.append((float(scores[prop, c]), c, prop))
        entries.sort(key=lambda e: (-e[0], e[1], e[2]))
        for score, c, prop in entries[:cfg.topk_per_image]:
            detections.append(Detection(
                image_id=int(img),
                category=categories[c],
                score=score,
                box=tuple(float(v) for v in boxes[prop, c])))
            consumed.add(prop)
    return detections, np.asarray(sorted(consumed), dtype=np.int64)


def canonical_order(detections) -> list:
    """Deterministic serialization order: image, category, score desc, box."""
    return sorted(detections, key=lambda d: (d.image_id, d.category, -d.score, d.box))
