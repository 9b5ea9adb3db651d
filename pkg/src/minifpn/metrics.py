"""COCO-style detection metrics: IoU matching, interpolated AP, size buckets.

Conventions, fixed here and mirrored by the independent reference evaluator
used in the tests:

- Detections are ranked globally by (descending score, image id, insertion
  order), so equal scores resolve deterministically.
- A detection matches the unmatched same-class ground-truth box with the
  highest IoU at or above the threshold; IoU ties take the earlier box.
- AP is 101-point interpolated: the precision envelope is sampled at recalls
  0.00, 0.01, ..., 1.00 and averaged.
- A class with no ground truth contributes AP 0 when it has scored
  detections and is skipped from the class mean when it has none.
- Size buckets (areas of the square toy objects): small below 13^2, medium
  from 13^2 below 33^2, large from 33^2. Bucketed AP keeps only in-bucket
  ground truth; a detection is dropped from scoring when it would match an
  out-of-bucket box, or when unmatched with its own area out of bucket.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .formats import read_detections, read_gt_boxes
from .head import box_iou

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
AREA_BUCKETS = {
    "small": (0.0, 169.0),
    "medium": (169.0, 1089.0),
    "large": (1089.0, float("inf")),
}
# Built by integer division so each grid value is exactly the float k/100;
# np.linspace lands one ulp high at some points, which silently excludes
# recall values that are themselves exact binary floats (e.g. 7/20 = 0.35).
RECALL_GRID = np.arange(101) / 100.0


def iou(a, b) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes."""
    acx, acy, aw, ah = _cxcywh(a)
    bcx, bcy, bw, bh = _cxcywh(b)
    iw = min(acx + aw / 2, bcx + bw / 2) - max(acx - aw / 2, bcx - bw / 2)
    ih = min(acy + ah / 2, bcy + bh / 2) - max(acy - ah / 2, bcy - bh / 2)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def _cxcywh(box):
    if hasattr(box, "cx"):
        return box.cx, box.cy, box.w, box.h
    return tuple(box)


def _in_bucket(area, bucket):
    if bucket is None:
        return True
    lo, hi = AREA_BUCKETS[bucket]
    return lo <= area < hi


class _ClassIndex:
    """One class's matching state, reused across thresholds and buckets.

    `entries` holds (image_id, detection area, IoU row) in global rank
    order, where the row lists IoUs against the image's same-class
    ground-truth boxes (None when the image has none); `gt_areas` maps
    image ids to the areas of those boxes in storage order.
    """

    def __init__(self, dets_per_image, gts_per_image, class_id):
        boxes_by_image = {}
        self.gt_areas = {}
        for image_id, gts in gts_per_image.items():
            rows = [g for g in gts if g.class_id == class_id]
            if rows:
                boxes_by_image[image_id] = np.array(
                    [(g.cx, g.cy, g.w, g.h) for g in rows])
                self.gt_areas[image_id] = [g.w * g.h for g in rows]

        ranked = []
        for image_id in sorted(dets_per_image):
            for det_index, det in enumerate(dets_per_image[image_id]):
                if det.class_id == class_id:
                    ranked.append((-det.score, image_id, det_index, det))
        ranked.sort(key=lambda r: r[:3])

        self.entries = []
        for _, image_id, _, det in ranked:
            boxes = boxes_by_image.get(image_id)
            row = None if boxes is None else box_iou(
                boxes, (det.cx, det.cy, det.w, det.h)).tolist()
            self.entries.append((image_id, det.w * det.h, row))

    def match(self, iou_thresh, bucket=None):
        """Greedy matching; returns (tp flags in rank order, gt count)."""
        if bucket is not None and bucket not in AREA_BUCKETS:
            raise ConfigError(f"unknown size bucket {bucket!r}")
        keep = {image_id: [_in_bucket(a, bucket) for a in areas]
                for image_id, areas in self.gt_areas.items()}
        gt_count = sum(sum(k) for k in keep.values())

        flags = []
        matched = set()
        for image_id, det_area, row in self.entries:
            best = -1
            best_iou = 0.0
            hits_ignored = False
            if row is not None:
                kept = keep[image_id]
                for i, overlap in enumerate(row):
                    if overlap < iou_thresh:
                        continue
                    if not kept[i]:
                        hits_ignored = True
                    elif (image_id, i) not in matched and overlap > best_iou:
                        best, best_iou = i, overlap
            if best >= 0:
                matched.add((image_id, best))
                flags.append(True)
            elif hits_ignored:
                continue
            elif not _in_bucket(det_area, bucket):
                continue
            else:
                flags.append(False)
        return flags, gt_count


def match_and_score(dets_per_image, gts_per_image, iou_thresh, class_id,
                    bucket=None):
    """Match one class at one IoU threshold; returns (flags, gt_count).

    `flags` is one boolean per scored detection (True for a true positive)
    in global rank order; detections excluded by the bucket rules are
    dropped. `gt_count` counts the in-bucket ground-truth boxes.
    """
    index = _ClassIndex(dets_per_image, gts_per_image, class_id)
    return index.match(iou_thresh, bucket)


def interpolated_precision(flags, gt_count):
    """Precision envelope sampled on the 101-point recall grid."""
    if gt_count == 0 or not flags:
        return np.zeros_like(RECALL_GRID)
    hits = np.asarray(flags, dtype=bool)
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / gt_count
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    out = np.zeros_like(RECALL_GRID)
    inside = idx < len(recall)
    out[inside] = envelope[idx[inside]]
    return out


def average_precision(flags, gt_count):
    """101-point AP; None means the class is skipped (nothing to measure)."""
    if gt_count == 0:
        return 0.0 if flags else None
    return float(interpolated_precision(flags, gt_count).mean())


def pr_curve(dets_per_image, gts_per_image, class_id, iou_thresh):
    """(recall grid, interpolated precision) arrays for one class."""
    flags, gt_count = match_and_score(dets_per_image, gts_per_image,
                                      iou_thresh, class_id)
    return RECALL_GRID.copy(), interpolated_precision(flags, gt_count)


@dataclass(frozen=True)
class EvalConfig:
    num_classes: int
    iou_thresholds: tuple = IOU_THRESHOLDS

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"need num_classes >= 1, got {self.num_classes}")
        if not self.iou_thresholds:
            raise ConfigError("need at least one IoU threshold")


@dataclass(frozen=True)
class EvalResult:
    """The six reported columns, all in [0, 1]."""

    ap: float
    ap50: float
    ap75: float
    ap_s: float
    ap_m: float
    ap_l: float

    def as_dict(self):
        return {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
                "ap_s": self.ap_s, "ap_m": self.ap_m, "ap_l": self.ap_l}


def _class_mean(values):
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else 0.0


def evaluate(dets_per_image, gts_per_image, config: EvalConfig) -> EvalResult:
    """Aggregate AP over classes, IoU thresholds, and size buckets."""
    thresholds = config.iou_thresholds
    indexes = [_ClassIndex(dets_per_image, gts_per_image, c)
               for c in range(config.num_classes)]

    def class_ap(index, bucket):
        per_threshold = [average_precision(*index.match(t, bucket))
                         for t in thresholds]
        present = [v for v in per_threshold if v is not None]
        return (float(np.mean(present)) if present else None), per_threshold

    overall = []
    at50 = []
    at75 = []
    for index in indexes:
        mean_ap, per_threshold = class_ap(index, None)
        overall.append(mean_ap)
        if 0.50 in thresholds:
            at50.append(per_threshold[thresholds.index(0.50)])
        if 0.75 in thresholds:
            at75.append(per_threshold[thresholds.index(0.75)])

    bucketed = {}
    for bucket in AREA_BUCKETS:
        bucketed[bucket] = _class_mean(
            [class_ap(index, bucket)[0] for index in indexes])

    return EvalResult(ap=_class_mean(overall),
                      ap50=_class_mean(at50),
                      ap75=_class_mean(at75),
                      ap_s=bucketed["small"],
                      ap_m=bucketed["medium"],
                      ap_l=bucketed["large"])


def evaluate_files(det_path, gt_path, config: EvalConfig) -> EvalResult:
    """Evaluate detection and ground-truth text files."""
    return evaluate(read_detections(det_path), read_gt_boxes(gt_path), config)
