"""Box arithmetic, anchor-point grids and point-to-box distance encoding.

Boxes are continuous ``xyxy`` pixel coordinates everywhere inside the
package. Scalar helpers operate on :class:`Box`; the ``*_matrix`` / array
helpers operate on ``(N, 4)`` numpy arrays and are what the assigner, head
and evaluator use.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    def is_valid(self) -> bool:
        return self.x1 <= self.x2 and self.y1 <= self.y2


class LabeledBox(NamedTuple):
    box: Box
    class_id: int


@dataclass(frozen=True)
class AnchorPoint:
    cx: float
    cy: float
    stride: float
    level: int


class DistanceTarget(NamedTuple):
    """Left/top/right/bottom distances in stride units."""

    l: float
    t: float
    r: float
    b: float


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = Box(*a).area + Box(*b).area - inter
    if union <= 0:
        return 0.0
    return min(inter / union, 1.0)


def giou(a: Box, b: Box) -> float:
    a, b = Box(*a), Box(*b)
    iw = max(min(a.x2, b.x2) - max(a.x1, b.x1), 0.0)
    ih = max(min(a.y2, b.y2) - max(a.y1, b.y1), 0.0)
    inter = iw * ih
    union = a.area + b.area - inter
    enclose = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    overlap = inter / union if union > 0 else 0.0
    if enclose <= 0:
        return overlap
    return overlap - (enclose - union) / enclose


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``a`` (N, 4) and ``b`` (M, 4)."""
    return kernels.box_iou_matrix(_as_boxes(a), _as_boxes(b))


def box_giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU between ``a`` (N, 4) and ``b`` (M, 4)."""
    return kernels.box_giou_matrix(_as_boxes(a), _as_boxes(b))


def aligned_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two (N, 4) arrays."""
    a, b = _as_boxes(a), _as_boxes(b)
    iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = iw * ih
    union = _areas(a) + _areas(b) - inter
    out = np.zeros(len(a))
    ok = union > 0
    out[ok] = inter[ok] / union[ok]
    return out


def make_grid(level_shapes: Sequence[tuple[int, int]], strides: Sequence[float]) -> list[AnchorPoint]:
    if len(level_shapes) != len(strides):
        raise ValueError(f"{len(level_shapes)} level shapes but {len(strides)} strides")
    if any(s2 <= s1 for s1, s2 in zip(strides, strides[1:])):
        raise ValueError(f"strides must be strictly increasing, got {list(strides)}")
    points = []
    for level, ((h, w), s) in enumerate(zip(level_shapes, strides)):
        for i in range(h):
            for j in range(w):
                points.append(AnchorPoint((j + 0.5) * s, (i + 0.5) * s, float(s), level))
    return points


def grid_arrays(level_shapes: Sequence[tuple[int, int]], strides: Sequence[float]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Array form of :func:`make_grid`: centers (N, 2), strides (N,), levels (N,)."""
    if len(level_shapes) != len(strides):
        raise ValueError(f"{len(level_shapes)} level shapes but {len(strides)} strides")
    centers, stride_col, levels = [], [], []
    for level, ((h, w), s) in enumerate(zip(level_shapes, strides)):
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        c = np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s], axis=1)
        centers.append(c)
        stride_col.append(np.full(h * w, float(s)))
        levels.append(np.full(h * w, level, dtype=np.int64))
    return np.concatenate(centers), np.concatenate(stride_col), np.concatenate(levels)


def encode_distances(p: AnchorPoint, gt: Box) -> DistanceTarget:
    gt = Box(*gt)
    if not (gt.x1 < p.cx < gt.x2 and gt.y1 < p.cy < gt.y2):
        raise ValueError(f"point ({p.cx}, {p.cy}) is not strictly inside {tuple(gt)}")
    s = p.stride
    return DistanceTarget((p.cx - gt.x1) / s, (p.cy - gt.y1) / s, (gt.x2 - p.cx) / s, (gt.y2 - p.cy) / s)


def decode_distances(p: AnchorPoint, d: DistanceTarget) -> Box:
    if min(d) < 0:
        raise ValueError(f"distances must be nonnegative, got {tuple(d)}")
    s = p.stride
    return Box(p.cx - d[0] * s, p.cy - d[1] * s, p.cx + d[2] * s, p.cy + d[3] * s)


def bbox2distance(centers: np.ndarray, strides: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Unchecked vectorized encode; may produce negative sides for outside points."""
    s = strides[:, None]
    lt = (centers - boxes[:, :2]) / s
    rb = (boxes[:, 2:] - centers) / s
    return np.concatenate([lt, rb], axis=1)


def distance2bbox(centers, strides, dist):
    """Vectorized decode; works on numpy arrays and torch tensors alike."""
    s = strides[:, None]
    x1y1 = centers - dist[:, :2] * s
    x2y2 = centers + dist[:, 2:] * s
    if isinstance(dist, np.ndarray):
        return np.concatenate([x1y1, x2y2], axis=1)
    import torch

    return torch.cat([x1y1, x2y2], dim=1)


def xywh_to_xyxy(b: Sequence[float]) -> Box:
    x, y, w, h = b
    return Box(x, y, x + w, y + h)


def xyxy_to_xywh(b: Sequence[float]) -> list[float]:
    x1, y1, x2, y2 = b
    return [x1, y1, x2 - x1, y2 - y1]


def cxcywh_to_xyxy(b: Sequence[float]) -> Box:
    cx, cy, w, h = b
    return Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, height)
    return out


def _areas(b: np.ndarray) -> np.ndarray:
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def _as_boxes(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 4))
