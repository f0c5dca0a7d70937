"""Detection matching, 101-point average precision, and convergence reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .detect import iou_matrix
from .errors import ValidationError

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.50, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def match_detections(det_boxes, gt_boxes, iou_threshold: float) -> np.ndarray:
    """Greedy TP/FP flags for score-sorted detections of one image+category.

    Each detection grabs the unmatched ground truth with the highest IoU
    at or above the threshold; IoU ties go to the lower ground-truth
    index, and every ground truth matches at most once.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    flags = np.zeros(len(det_boxes), dtype=bool)
    if len(gt_boxes) == 0 or len(det_boxes) == 0:
        return flags
    ious = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in range(len(det_boxes)):
        masked = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(masked))
        if masked[j] >= iou_threshold:
            flags[i] = True
            taken[j] = True
    return flags


def average_precision(scores, tp_flags, num_gt: int) -> float:
    """COCO-style 101-point interpolated AP from pooled flags and scores.

    Detections are sorted by descending score (stable, so ties keep their
    pooled order); precision is made non-increasing from the right and
    sampled at recalls 0.00, 0.01, ..., 1.00.  Zero ground truth gives 0
    here; `evaluate` additionally excludes such categories from means.
    """
    if num_gt < 0:
        raise ValueError(f"num_gt must be >= 0, got {num_gt}")
    scores = np.asarray(scores, dtype=np.float64)
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if scores.shape != tp_flags.shape:
        raise ValueError("scores and flags must align")
    if num_gt == 0 or scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp_flags[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / num_gt
    precision = cum_tp / (cum_tp + cum_fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(interp.mean())


def ground_truth_objects(ds) -> dict:
    """Unique (image, category) ground-truth boxes from labeled records.

    Proposals of one object repeat the same gt box, so boxes are deduped
    exactly per image and category.
    """
    if not ds.has_labels or ds.labels is None:
        raise ValidationError("dataset has no labels to evaluate against")
    out: dict = {}
    fg = np.flatnonzero(ds.labels >= 0)
    for i in fg:
        key = (int(ds.image_ids[i]), int(ds.labels[i]))
        out.setdefault(key, set()).add(tuple(float(v) for v in ds.gt_boxes[i]))
    return {key: np.asarray(sorted(boxes), dtype=np.float64)
            for key, boxes in out.items()}


@dataclass
class EvalResult:
    """Per-category AP across IoU thresholds plus aggregate and split means.

    Categories without ground truth are recorded as None and excluded
    from every mean.
    """

    thresholds: list
    per_category: dict                 # name -> list of APs per threshold, or None
    ap: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    splits: dict = field(default_factory=dict)  # name -> {"ap","ap50","ap75"}

    def to_dict(self) -> dict:
        return {"thresholds": [float(t) for t in self.thresholds],
                "per_category": self.per_category, "ap": self.ap,
                "ap50": self.ap50, "ap75": self.ap75, "splits": self.splits}


def _mean_over(per_category: dict, names, column: Optional[int]) -> Optional[float]:
    rows = [per_category[n] for n in names if per_category.get(n) is not None]
    if not rows:
        return None
    if column is None:
        return float(np.mean([np.mean(r) for r in rows]))
    return float(np.mean([r[column] for r in rows]))


def evaluate(detections, ds, splits: Optional[dict] = None) -> EvalResult:
    """Score detections against a labeled dataset.

    `splits` maps split names to category-name lists for per-split means.
    Detection categories must resolve against the dataset header.
    """
    names = list(ds.category_names)
    index = {name: i for i, name in enumerate(names)}
    for det in detections:
        if det.category not in index:
            raise ValidationError(f"unknown category {det.category!r} in detections")
    if splits:
        for split_name, members in splits.items():
            for member in members:
                if member not in index:
                    raise ValidationError(
                        f"unknown category {member!r} in split {split_name!r}")

    gt = ground_truth_objects(ds)
    num_gt = {c: 0 for c in range(len(names))}
    for (_, cat), boxes in gt.items():
        num_gt[cat] += len(boxes)

    by_cat_img: dict = {}
    for det in detections:
        by_cat_img.setdefault((index[det.category], det.image_id), []).append(det)

    per_category: dict = {}
    for cat, name in enumerate(names):
        if num_gt[cat] == 0:
            per_category[name] = None
            continue
        pooled_scores: list = []
        pooled_flags: dict = {t: [] for t in IOU_THRESHOLDS}
        images = sorted({img for c, img in by_cat_img if c == cat})
        for img in images:
            dets = by_cat_img[(cat, img)]
            order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
            boxes = np.asarray([dets[i].box for i in order], dtype=np.float64)
            gts = gt.get((img, cat), np.zeros((0, 4)))
            pooled_scores.extend(dets[i].score for i in order)
            for t in IOU_THRESHOLDS:
                pooled_flags[t].extend(match_detections(boxes, gts, float(t)))
        per_category[name] = [
            average_precision(pooled_scores, pooled_flags[t], num_gt[cat])
            for t in IOU_THRESHOLDS]

    t50 = IOU_THRESHOLDS.index(0.5)
    t75 = IOU_THRESHOLDS.index(0.75)
    result = EvalResult(
        thresholds=list(IOU_THRESHOLDS), per_category=per_category,
        ap=_mean_over(per_category, names, None),
        ap50=_mean_over(per_category, names, t50),
        ap75=_mean_over(per_category, names, t75))
    for split_name, members in (splits or {}).items():
        result.splits[split_name] = {
            "ap": _mean_over(per_category, members, None),
            "ap50": _mean_over(per_category, members, t50),
            "ap75": _mean_over(per_category, members, t75)}
    return result


@dataclass
class CurveSummary:
    reached: bool
    iteration: Optional[int]
    elapsed_seconds: Optional[float]


@dataclass
class ConvergenceReport:
    """Time/iteration-to-target per curve plus pairwise speedup ratios.

    `time_speedup[a][b]` is how many times faster curve `a` hit the target
    than curve `b` (elapsed_b / elapsed_a); None when either never reached
    it.  `iteration_speedup` is the same ratio in iteration counts.
    """

    target_loss: float
    curves: dict
    time_speedup: dict
    iteration_speedup: dict

    def to_dict(self) -> dict:
        return {
            "target_loss": self.target_loss,
            "curves": {name: {"reached": s.reached, "iteration": s.iteration,
                              "elapsed_seconds": s.elapsed_seconds}
                       for name, s in self.curves.items()},
            "time_speedup": self.time_speedup,
            "iteration_speedup": self.iteration_speedup}


def convergence_report(curves: dict, target_loss: float) -> ConvergenceReport:
    """First time and iteration each curve reaches the target loss."""
    if len(curves) < 2:
        raise ValueError("need at least two curves to compare")
    summaries: dict = {}
    for name, curve in curves.items():
        hit = next((k for k, loss in enumerate(curve.losses) if loss <= target_loss),
                   None)
        if hit is None:
            summaries[name] = CurveSummary(False, None, None)
        else:
            summaries[name] = CurveSummary(True, curve.iterations[hit],
                                           curve.elapsed_seconds[hit])

    def ratios(value):
        table: dict = {}
        for a, sa in summaries.items():
            table[a] = {}
            for b, sb in summaries.items():
                if a == b or not (sa.reached and sb.reached) or value(sa) == 0:
                    table[a][b] = 1.0 if a == b and sa.reached else None
                else:
                    table[a][b] = value(sb) / value(sa)
        return table

    return ConvergenceReport(
        target_loss=float(target_loss), curves=summaries,
        time_speedup=ratios(lambda s: s.elapsed_seconds),
        iteration_speedup=ratios(lambda s: s.iteration))


def merged_curves_csv(curves: dict) -> str:
    """All curves in one CSV with a leading name column."""
    lines = ["curve,iteration,elapsed_seconds,loss"]
    for name, curve in curves.items():
        for i, t, l in zip(curve.iterations, curve.elapsed_seconds, curve.losses):
            lines.append(f"{name},{i},{t!r},{l!r}")
    return "\n".join(lines) + "\n"
