"""Segmentation quality metrics: IoU family, panoptic quality, proposal
recall, and single-threshold average precision.

Every metric is computable from summable per-image counts so that multi-scene
reports reduce by summation rather than averaging per-image scores. Void
pixels (-1) never enter confusion counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ensemble import PanopticMap
from .errors import DimensionError, NumericError
from .fixtures import GroundTruth

RECALL_THRESHOLDS = (0.5, 0.75, 0.9)


# -- IoU family -----------------------------------------------------------------

def confusion_counts(pred: np.ndarray, gt: np.ndarray,
                     num_classes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class (intersection, predicted-area, gt-area) over labeled pixels."""
    if pred.shape != gt.shape:
        raise DimensionError(f"map shapes differ: {pred.shape} vs {gt.shape}")
    valid = gt >= 0
    p = pred[valid]
    g = gt[valid]
    inter = np.zeros(num_classes, dtype=np.int64)
    pred_count = np.zeros(num_classes, dtype=np.int64)
    gt_count = np.zeros(num_classes, dtype=np.int64)
    for j in range(num_classes):
        pj = p == j
        gj = g == j
        inter[j] = np.count_nonzero(pj & gj)
        pred_count[j] = np.count_nonzero(pj)
        gt_count[j] = np.count_nonzero(gj)
    return inter, pred_count, gt_count


def iou_from_counts(inter: np.ndarray, pred_count: np.ndarray,
                    gt_count: np.ndarray) -> tuple[np.ndarray, float, float]:
    """(per-class IoU with NaN for absent classes, mIoU, FWIoU)."""
    union = pred_count + gt_count - inter
    per_class = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    present = union > 0
    miou_value = float(np.mean(per_class[present])) if present.any() else float("nan")
    total = gt_count.sum()
    if total > 0:
        weights = gt_count / total
        fwiou = float(np.nansum(np.where(gt_count > 0, weights * per_class, 0.0)))
    else:
        fwiou = float("nan")
    return per_class, miou_value, fwiou


def miou(pred: np.ndarray, gt: np.ndarray,
         num_classes: int) -> tuple[np.ndarray, float, float]:
    """Per-class IoU, mean IoU over classes present in either map, and
    GT-frequency-weighted IoU."""
    return iou_from_counts(*confusion_counts(pred, gt, num_classes))


# -- panoptic quality -----------------------------------------------------------

def pq_counts(pred: PanopticMap, gt: PanopticMap) -> tuple[float, int, int, int]:
    """(matched IoU sum, TP, FP, FN). Segments match when they share a class
    and overlap with IoU > 0.5, which makes the matching unique; that
    uniqueness is asserted rather than assumed."""
    if pred.segments.shape != gt.segments.shape:
        raise DimensionError(f"map shapes differ: {pred.segments.shape} "
                             f"vs {gt.segments.shape}")
    pred_ids, pred_areas = np.unique(pred.segments[pred.segments >= 0],
                                     return_counts=True)
    gt_ids, gt_areas = np.unique(gt.segments[gt.segments >= 0], return_counts=True)
    pred_area = dict(zip(pred_ids.tolist(), pred_areas.tolist()))
    gt_area = dict(zip(gt_ids.tolist(), gt_areas.tolist()))

    both = (pred.segments >= 0) & (gt.segments >= 0)
    pairs, pair_counts = np.unique(
        np.stack([pred.segments[both], gt.segments[both]]), axis=1, return_counts=True)

    iou_sum = 0.0
    matched_pred: set[int] = set()
    matched_gt: set[int] = set()
    for (pid, gid), inter in zip(pairs.T.tolist(), pair_counts.tolist()):
        if pred.classes[pid] != gt.classes[gid]:
            continue
        union = pred_area[pid] + gt_area[gid] - inter
        iou = inter / union
        if iou > 0.5:
            if pid in matched_pred or gid in matched_gt:
                raise NumericError("panoptic matching at IoU > 0.5 was not unique")
            matched_pred.add(pid)
            matched_gt.add(gid)
            iou_sum += iou
    tp = len(matched_pred)
    fp = len(pred_area) - tp
    fn = len(gt_area) - tp
    return iou_sum, tp, fp, fn


def pq_from_counts(iou_sum: float, tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    denom = tp + 0.5 * fp + 0.5 * fn
    if denom == 0:
        return 1.0, 1.0, 1.0  # both maps empty: vacuously perfect
    pq = iou_sum / denom
    sq = iou_sum / tp if tp else 0.0
    rq = tp / denom
    return pq, sq, rq


def panoptic_quality(pred: PanopticMap, gt: PanopticMap) -> tuple[float, float, float]:
    return pq_from_counts(*pq_counts(pred, gt))


# -- class-agnostic proposal recall ----------------------------------------------

def recall_counts(proposals: np.ndarray, gt: GroundTruth, is_seen: np.ndarray,
                  thresholds=RECALL_THRESHOLDS) -> dict[str, dict[float, list[int]]]:
    """Per group ("seen"/"unseen") and threshold: [recalled, total] GT masks."""
    counts = {g: {t: [0, 0] for t in thresholds} for g in ("seen", "unseen")}
    proposals = np.asarray(proposals, dtype=bool)
    for seg_id, cls in enumerate(gt.segment_classes):
        mask = gt.panoptic == seg_id
        area = mask.sum()
        best = 0.0
        for prop in proposals:
            inter = np.count_nonzero(mask & prop)
            union = area + np.count_nonzero(prop) - inter
            if union:
                best = max(best, inter / union)
        group = "seen" if is_seen[cls] else "unseen"
        for t in thresholds:
            counts[group][t][1] += 1
            if best >= t:
                counts[group][t][0] += 1
    return counts


def merge_recall_counts(a, b):
    for group in a:
        for t in a[group]:
            a[group][t][0] += b[group][t][0]
            a[group][t][1] += b[group][t][1]
    return a


def recall_from_counts(counts) -> dict[str, dict[float, float]]:
    return {group: {t: (hit / total if total else 0.0)
                    for t, (hit, total) in by_t.items()}
            for group, by_t in counts.items()}


def mask_recall(proposals: np.ndarray, gt: GroundTruth, is_seen: np.ndarray,
                thresholds=RECALL_THRESHOLDS) -> dict[str, dict[float, float]]:
    """Fraction of GT masks covered by some proposal at each IoU threshold,
    split by whether the mask's class is in the training vocabulary."""
    return recall_from_counts(recall_counts(proposals, gt, is_seen, thresholds))


# -- average precision at IoU 0.5 -------------------------------------------------

def _interpolated_ap(tp_flags: list[bool], num_gt: int) -> float:
    if num_gt == 0:
        return float("nan")
    if not tp_flags:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum([not f for f in tp_flags])
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # all-point interpolation: integrate the precision envelope over recall
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def average_precision_50(predictions, gt: GroundTruth) -> float:
    """AP at IoU 0.5 over (mask, class, score) predictions for one scene."""
    return pooled_average_precision_50([predictions], [gt])


def pooled_average_precision_50(per_scene_predictions, gts) -> float:
    """AP at IoU 0.5 with detections pooled across scenes, averaged over
    classes that appear in some GT (COCO-style greedy matching by score)."""
    classes = sorted({c for gt in gts for c in gt.segment_classes})
    if not classes:
        return float("nan")
    aps = []
    for cls in classes:
        detections = []  # (score, scene index, mask)
        for scene_idx, preds in enumerate(per_scene_predictions):
            for mask, pred_cls, score in preds:
                if pred_cls == cls:
                    detections.append((float(score), scene_idx, np.asarray(mask, bool)))
        detections.sort(key=lambda d: -d[0])
        gt_masks = {scene_idx: [np.asarray(gt.panoptic == sid, bool)
                                for sid, c in enumerate(gt.segment_classes) if c == cls]
                    for scene_idx, gt in enumerate(gts)}
        num_gt = sum(len(v) for v in gt_masks.values())
        matched = {scene_idx: [False] * len(v) for scene_idx, v in gt_masks.items()}
        tp_flags = []
        for _, scene_idx, mask in detections:
            best_iou, best_k = 0.0, -1
            for k, gmask in enumerate(gt_masks[scene_idx]):
                if matched[scene_idx][k]:
                    continue
                inter = np.count_nonzero(mask & gmask)
                union = np.count_nonzero(mask | gmask)
                iou = inter / union if union else 0.0
                if iou > best_iou:
                    best_iou, best_k = iou, k
            if best_iou >= 0.5:
                matched[scene_idx][best_k] = True
                tp_flags.append(True)
            else:
                tp_flags.append(False)
        if num_gt:
            aps.append(_interpolated_ap(tp_flags, num_gt))
    return float(np.mean(aps)) if aps else float("nan")


# -- reports ----------------------------------------------------------------------

REPORT_SCHEMA = {
    "type": "object",
    "required": ["miou", "fwiou", "per_class_iou", "pq", "sq", "rq", "ap50", "recall"],
    "additionalProperties": False,
    "properties": {
        "miou": {"type": "number"},
        "fwiou": {"type": "number"},
        "per_class_iou": {"type": "object",
                          "additionalProperties": {"type": "number"}},
        "pq": {"type": "number"},
        "sq": {"type": "number"},
        "rq": {"type": "number"},
        "ap50": {"type": "number"},
        "recall": {
            "type": "object",
            "required": ["seen", "unseen"],
            "additionalProperties": False,
            "properties": {
                "seen": {"type": "object",
                         "additionalProperties": {"type": "number"}},
                "unseen": {"type": "object",
                           "additionalProperties": {"type": "number"}},
            },
        },
    },
}


@dataclass
class QualityReport:
    miou: float
    fwiou: float
    per_class_iou: dict[str, float] = field(default_factory=dict)
    pq: float = 0.0
    sq: float = 0.0
    rq: float = 0.0
    ap50: float = 0.0
    recall: dict[str, dict[float, float]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        recall = {group: {f"{t:g}": v for t, v in by_t.items()}
                  for group, by_t in self.recall.items()}
        recall.setdefault("seen", {})
        recall.setdefault("unseen", {})
        return {
            "miou": self.miou,
            "fwiou": self.fwiou,
            "per_class_iou": {k: v for k, v in self.per_class_iou.items()},
            "pq": self.pq,
            "sq": self.sq,
            "rq": self.rq,
            "ap50": self.ap50,
            "recall": recall,
        }
