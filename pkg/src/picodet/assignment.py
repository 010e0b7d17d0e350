"""Label assignment: ATSS baseline, original SimOTA and VFL/GIoU-cost SimOTA.

All assigners work on detached numpy arrays for a single image and return
an :class:`AssignmentResult` covering every anchor of that image. Ties are
broken by the lowest anchor index (and lowest GT index for conflicts).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .geometry import bbox2distance, box_giou_matrix, box_iou_matrix

logger = logging.getLogger(__name__)

MODES = ("atss", "simota_original", "simota_modified")
SENTINEL = 1e9
# Positives whose predicted box misses the GT still carry a strictly positive target.
QUALITY_FLOOR = 1e-6


@dataclass(frozen=True)
class AssignerConfig:
    top_n: int = 10
    cost_lambda: float = 6.0
    center_radius: float = 2.5
    atss_topk: int = 9
    atss_anchor_scale: float = 5.0
    mode: str = "simota_modified"
    vfl_alpha: float = 0.75
    vfl_gamma: float = 2.0

    def __post_init__(self):
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")
        if self.cost_lambda <= 0 or self.center_radius <= 0:
            raise ValueError("cost_lambda and center_radius must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class AssignmentResult:
    matched_gt: np.ndarray       # (A,) int64, -1 for negatives
    quality: np.ndarray          # (A,) float64, 0 for negatives
    class_target: np.ndarray     # (A,) int64, -1 for negatives
    distance_target: np.ndarray  # (A, 4) stride units, NaN for negatives
    gt_boxes: np.ndarray         # (A, 4) matched GT box, NaN for negatives

    @property
    def positive(self) -> np.ndarray:
        return self.matched_gt >= 0

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())

    @classmethod
    def negative(cls, num_anchors: int) -> "AssignmentResult":
        return cls(np.full(num_anchors, -1, dtype=np.int64), np.zeros(num_anchors),
                   np.full(num_anchors, -1, dtype=np.int64), np.full((num_anchors, 4), np.nan),
                   np.full((num_anchors, 4), np.nan))

    @classmethod
    def concat(cls, results: Sequence["AssignmentResult"]) -> "AssignmentResult":
        """Stack per-image results; GT indices stay image-local."""
        return cls(*(np.concatenate([getattr(r, f) for r in results])
                     for f in ("matched_gt", "quality", "class_target", "distance_target", "gt_boxes")))

    def check(self) -> None:
        pos = self.positive
        if not np.array_equal(pos, self.quality > 0) or not np.array_equal(pos, self.class_target >= 0):
            raise AssertionError("matched_gt, quality and class_target disagree on positives")


@dataclass
class CostMatrix:
    cost: np.ndarray          # (num_candidates, num_gt); sentinel where the pair is not a candidate
    anchor_index: np.ndarray  # (num_candidates,) anchor id of each row

    def dense(self, num_anchors: int) -> np.ndarray:
        out = np.full((num_anchors, self.cost.shape[1]), SENTINEL)
        out[self.anchor_index] = self.cost
        return out


def _anchor_arrays(anchors):
    if isinstance(anchors, tuple):
        return np.asarray(anchors[0], dtype=np.float64), np.asarray(anchors[1], dtype=np.float64)
    centers = np.array([[a.cx, a.cy] for a in anchors], dtype=np.float64).reshape(-1, 2)
    strides = np.array([a.stride for a in anchors], dtype=np.float64)
    return centers, strides


def _gt_arrays(gts):
    if isinstance(gts, tuple):
        return np.asarray(gts[0], dtype=np.float64).reshape(-1, 4), np.asarray(gts[1], dtype=np.int64)
    boxes = np.array([tuple(g.box) for g in gts], dtype=np.float64).reshape(-1, 4)
    labels = np.array([g.class_id for g in gts], dtype=np.int64)
    return boxes, labels


def center_prior_candidates(anchors, gts, cfg: AssignerConfig = AssignerConfig()) -> np.ndarray:
    """Boolean (A, G) mask: point inside the GT box or within the center radius.

    ``anchors`` is a list of :class:`AnchorPoint` or a ``(centers, strides)``
    tuple; ``gts`` a list of ``LabeledBox`` or a ``(boxes, labels)`` tuple.
    The radius test uses Chebyshev distance in pixels, ``radius * stride``.
    """
    centers, strides = _anchor_arrays(anchors)
    boxes, _ = _gt_arrays(gts)
    if len(centers) == 0:
        raise ValueError("anchor list is empty")
    if len(boxes) == 0:
        return np.zeros((len(centers), 0), dtype=bool)
    x, y = centers[:, 0:1], centers[:, 1:2]
    inside = (x > boxes[:, 0]) & (x < boxes[:, 2]) & (y > boxes[:, 1]) & (y < boxes[:, 3])
    gcx = (boxes[:, 0] + boxes[:, 2]) / 2
    gcy = (boxes[:, 1] + boxes[:, 3]) / 2
    r = cfg.center_radius * strides[:, None]
    near = np.maximum(np.abs(x - gcx), np.abs(y - gcy)) < r
    return inside | near


def dynamic_k(ious, cfg: AssignerConfig = AssignerConfig()) -> int:
    """Positive count for one GT from its candidate IoUs; 0 when there are none."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        return 0
    top = np.sort(ious)[::-1][: cfg.top_n]
    return int(min(max(1, np.floor(top.sum())), ious.size))


def _vfl_np(p, q, alpha, gamma):
    p = np.clip(p, 1e-9, 1 - 1e-9)
    pos = q * -(q * np.log(p) + (1 - q) * np.log1p(-p))
    neg = alpha * p ** gamma * -np.log1p(-p)
    return np.where(q > 0, pos, neg)


def simota_cost(pred_scores, pred_boxes, gts, candidates, cfg: AssignerConfig = AssignerConfig()) -> CostMatrix:
    """Cost over candidate anchors (rows) and GTs (columns).

    Modified mode: class-vector VFL against a target holding the IoU at the
    GT class, plus ``cost_lambda`` times the GIoU loss. Original mode: BCE
    against the one-hot class plus ``cost_lambda * (1 - IoU)``.
    """
    scores = np.clip(np.asarray(pred_scores, dtype=np.float64), 1e-9, 1 - 1e-9)
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    boxes, labels = _gt_arrays(gts)
    candidates = np.asarray(candidates, dtype=bool)
    rows = np.flatnonzero(candidates.any(1)) if candidates.size else np.zeros(0, dtype=np.int64)
    s = scores[rows]
    pb = pred_boxes[rows]
    ious = box_iou_matrix(pb, boxes)
    p_gt = s[:, labels]
    if cfg.mode == "simota_modified":
        neg_all = _vfl_np(s, np.zeros_like(s), cfg.vfl_alpha, cfg.vfl_gamma)
        cls_cost = (neg_all.sum(1, keepdims=True)
                    - _vfl_np(p_gt, np.zeros_like(p_gt), cfg.vfl_alpha, cfg.vfl_gamma)
                    + _vfl_np(p_gt, ious, cfg.vfl_alpha, cfg.vfl_gamma))
        reg_cost = 1 - box_giou_matrix(pb, boxes)
    elif cfg.mode == "simota_original":
        neg_all = -np.log1p(-s)
        cls_cost = neg_all.sum(1, keepdims=True) + np.log1p(-p_gt) - np.log(p_gt)
        reg_cost = 1 - ious
    else:
        raise ValueError(f"simota_cost needs a simota mode, got {cfg.mode!r}")
    cost = cls_cost + cfg.cost_lambda * reg_cost
    cost = np.where(candidates[rows], cost, SENTINEL)
    return CostMatrix(cost, rows)


def simota_assign(pred_scores, pred_boxes, anchors, gts, cfg: AssignerConfig = AssignerConfig()) -> AssignmentResult:
    """Dynamic top-k assignment on the current predictions of one image."""
    if cfg.mode not in ("simota_original", "simota_modified"):
        raise ValueError(f"simota_assign needs a simota mode, got {cfg.mode!r}")
    centers, strides = _anchor_arrays(anchors)
    boxes, labels = _gt_arrays(gts)
    num_anchors = len(centers)
    if len(boxes) == 0:
        return AssignmentResult.negative(num_anchors)
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    candidates = center_prior_candidates((centers, strides), (boxes, labels), cfg)
    cm = simota_cost(pred_scores, pred_boxes, (boxes, labels), candidates, cfg)
    cost = cm.dense(num_anchors)
    ious = box_iou_matrix(pred_boxes, boxes)
    ks = np.zeros(len(boxes), dtype=np.int64)
    for g in range(len(boxes)):
        cand = candidates[:, g]
        if not cand.any():
            logger.debug("GT %d has no center-prior candidates; it gets no positives", g)
            continue
        ks[g] = dynamic_k(ious[cand, g], cfg)
    matched = kernels.simota_select(cost, candidates, ks)
    return _build_result(matched, ious, centers, strides, boxes, labels)


def _build_result(matched, ious, centers, strides, boxes, labels) -> AssignmentResult:
    res = AssignmentResult.negative(len(centers))
    pos = np.flatnonzero(matched >= 0)
    if len(pos):
        g = matched[pos]
        res.matched_gt[pos] = g
        res.quality[pos] = np.maximum(ious[pos, g], QUALITY_FLOOR)
        res.class_target[pos] = labels[g]
        res.gt_boxes[pos] = boxes[g]
        res.distance_target[pos] = bbox2distance(centers[pos], strides[pos], boxes[g])
    return res


def atss_threshold(ious) -> float:
    """mean + population std of candidate IoUs."""
    ious = np.asarray(ious, dtype=np.float64)
    return float(ious.mean() + ious.std())


def atss_assign(anchors, levels, gts, cfg: AssignerConfig = AssignerConfig(), pred_boxes=None) -> AssignmentResult:
    """Adaptive training sample selection around each GT.

    Anchor cells are squares of side ``stride * atss_anchor_scale``. Quality
    targets are IoU(predicted box, GT) when ``pred_boxes`` is given, else the
    anchor-cell IoU.
    """
    centers, strides = _anchor_arrays(anchors)
    levels = np.asarray(levels, dtype=np.int64)
    boxes, labels = _gt_arrays(gts)
    num_anchors = len(centers)
    if len(boxes) == 0:
        return AssignmentResult.negative(num_anchors)
    half = strides * cfg.atss_anchor_scale / 2
    cells = np.stack([centers[:, 0] - half, centers[:, 1] - half, centers[:, 0] + half, centers[:, 1] + half], 1)
    cell_iou = box_iou_matrix(cells, boxes)
    gcenter = np.stack([(boxes[:, 0] + boxes[:, 2]) / 2, (boxes[:, 1] + boxes[:, 3]) / 2], 1)
    dist = np.linalg.norm(centers[:, None, :] - gcenter[None], axis=2)
    x, y = centers[:, 0:1], centers[:, 1:2]
    inside = (x > boxes[:, 0]) & (x < boxes[:, 2]) & (y > boxes[:, 1]) & (y < boxes[:, 3])
    best_iou = np.full(num_anchors, -1.0)
    matched = np.full(num_anchors, -1, dtype=np.int64)
    for g in range(len(boxes)):
        cand = []
        for lvl in np.unique(levels):
            idx = np.flatnonzero(levels == lvl)
            order = np.argsort(dist[idx, g], kind="stable")[: cfg.atss_topk]
            cand.append(idx[order])
        cand = np.concatenate(cand)
        thr = atss_threshold(cell_iou[cand, g])
        keep = cand[(cell_iou[cand, g] >= thr) & inside[cand, g]]
        for a in np.sort(keep):
            if cell_iou[a, g] > best_iou[a]:
                best_iou[a] = cell_iou[a, g]
                matched[a] = g
    if pred_boxes is not None:
        ious = box_iou_matrix(np.asarray(pred_boxes, dtype=np.float64), boxes)
    else:
        ious = cell_iou
    return _build_result(matched, ious, centers, strides, boxes, labels)


def assign(cfg: AssignerConfig, pred_scores, pred_boxes, centers, strides, levels, gt_boxes, gt_labels) -> AssignmentResult:
    """Dispatch on ``cfg.mode``."""
    anchors = (centers, strides)
    gts = (gt_boxes, gt_labels)
    if cfg.mode == "atss":
        return atss_assign(anchors, levels, gts, cfg, pred_boxes=pred_boxes)
    return simota_assign(pred_scores, pred_boxes, anchors, gts, cfg)

