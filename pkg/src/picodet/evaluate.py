"""COCO-style mean average precision (101-point interpolation)."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import kernels
from .data import DatasetIndex
from .geometry import box_iou_matrix

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class MapResult:
    map: float
    map50: float
    per_class: dict = field(default_factory=dict)  # class_id -> {"ap": .., "ap50": ..}

    def to_dict(self) -> dict:
        return {"mAP": self.map, "mAP50": self.map50,
                "per_class": {str(k): v for k, v in sorted(self.per_class.items())}}


def interpolated_ap(tp: np.ndarray, scores: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP for one class at one IoU threshold."""
    if num_gt == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order].astype(np.float64)
    tpc = np.cumsum(tp)
    fpc = np.cumsum(1 - tp)
    recall = tpc / num_gt
    precision = tpc / np.maximum(tpc + fpc, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def _gt_table(ground_truth) -> tuple[dict, int]:
    """(image_id, class_id) -> boxes, plus the number of classes."""
    table: dict = defaultdict(list)
    if isinstance(ground_truth, DatasetIndex):
        for a in ground_truth.annotations:
            table[(a.image_id, a.class_id)].append(tuple(a.box))
        return table, ground_truth.num_classes
    cat_index = {c["id"]: i for i, c in enumerate(ground_truth["categories"])}
    for a in ground_truth["annotations"]:
        x, y, w, h = a["bbox"]
        table[(a["image_id"], cat_index[a["category_id"]])].append((x, y, x + w, y + h))
    return table, len(cat_index)


def evaluate_map(predictions: Iterable[Mapping], ground_truth, max_detections: int = 100) -> MapResult:
    """Average precision over IoU 0.50:0.05:0.95 and classes.

    Args:
        predictions: records ``{image_id, box (xyxy), score, class_id}``.
        ground_truth: a :class:`DatasetIndex` or a COCO-JSON dict.

    Classes with no ground truth are left out of the mean. Detections are
    matched greedily per image and class in descending score order, each to
    the highest-IoU unmatched ground truth.
    """
    gt, num_classes = _gt_table(ground_truth)
    preds: dict = defaultdict(list)
    for p in predictions:
        c = int(p["class_id"])
        if not 0 <= c < num_classes:
            raise ValueError(f"prediction has unknown class id {c}")
        preds[(p["image_id"], c)].append((float(p["score"]), tuple(p["box"])))
    num_t = len(IOU_THRESHOLDS)
    per_class_tp = defaultdict(list)
    per_class_scores = defaultdict(list)
    num_gt = defaultdict(int)
    for (img, c), boxes in gt.items():
        num_gt[c] += len(boxes)
    for key, dets in preds.items():
        img, c = key
        dets = sorted(enumerate(dets), key=lambda t: (-t[1][0], t[0]))[:max_detections]
        scores = np.array([d[1][0] for d in dets])
        dboxes = np.array([d[1][1] for d in dets], dtype=np.float64).reshape(-1, 4)
        gboxes = np.array(gt.get(key, []), dtype=np.float64).reshape(-1, 4)
        if len(gboxes):
            match = kernels.coco_match(box_iou_matrix(dboxes, gboxes), IOU_THRESHOLDS)
        else:
            match = np.full((num_t, len(dets)), -1)
        per_class_tp[c].append(match >= 0)
        per_class_scores[c].append(scores)
    per_class = {}
    aps = []
    for c in range(num_classes):
        if num_gt[c] == 0:
            continue
        if per_class_scores[c]:
            tp = np.concatenate(per_class_tp[c], axis=1)
            sc = np.concatenate(per_class_scores[c])
        else:
            tp = np.zeros((num_t, 0), dtype=bool)
            sc = np.zeros(0)
        ap_t = np.array([interpolated_ap(tp[t], sc, num_gt[c]) for t in range(num_t)])
        per_class[c] = {"ap": float(ap_t.mean()), "ap50": float(ap_t[0])}
        aps.append(ap_t)
    if not aps:
        return MapResult(0.0, 0.0, {})
    aps = np.array(aps)
    return MapResult(float(aps.mean()), float(aps[:, 0].mean()), per_class)
