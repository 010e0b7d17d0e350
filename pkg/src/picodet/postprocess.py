"""Integral box decoding, score filtering and class-wise NMS."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .geometry import Box, clip_boxes, distance2bbox
from .models.head import HeadConfig


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int

    def to_json(self, image_id) -> dict:
        return {"image_id": image_id, "box": [float(v) for v in self.box], "score": float(self.score),
                "class_id": int(self.class_id)}


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def decode(cls_scores: np.ndarray, reg_dists: np.ndarray, centers: np.ndarray, strides: np.ndarray,
           image_size: tuple[int, int], cfg: HeadConfig = HeadConfig()) -> list[Detection]:
    """Decode one image's flattened head outputs.

    Args:
        cls_scores: (A, num_classes) sigmoid scores.
        reg_dists: (A, 4, reg_max + 1) per-side probability vectors.
        centers, strides: anchor geometry matching the rows.
        image_size: (height, width) used for clipping.

    Returns every (anchor, class) pair scoring at least
    ``cfg.score_threshold``, best first, capped at ``cfg.pre_nms_top_k``.
    """
    cls_scores = np.asarray(cls_scores, dtype=np.float64)
    reg_dists = np.asarray(reg_dists, dtype=np.float64)
    bins = np.arange(reg_dists.shape[-1], dtype=np.float64)
    dist = reg_dists @ bins
    boxes = distance2bbox(np.asarray(centers, dtype=np.float64), np.asarray(strides, dtype=np.float64), dist)
    h, w = image_size
    boxes = clip_boxes(boxes, w, h)
    a_idx, c_idx = np.nonzero(cls_scores >= cfg.score_threshold)
    scores = cls_scores[a_idx, c_idx]
    order = np.lexsort((a_idx, -scores))[: cfg.pre_nms_top_k]
    return [Detection(Box(*map(float, boxes[a_idx[i]])), float(scores[i]), int(c_idx[i])) for i in order]


def nms(dets: Sequence[Detection], cfg: HeadConfig = HeadConfig()) -> list[Detection]:
    """Class-wise greedy suppression; output sorted by descending score."""
    if not dets:
        return []
    boxes = np.array([tuple(d.box) for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets])
    labels = np.array([d.class_id for d in dets], dtype=np.int64)
    keep = kernels.batched_nms(boxes, scores, labels, cfg.nms_iou, cfg.max_detections)
    return [dets[i] for i in keep]


def postprocess(cls_scores, reg_dists, centers, strides, image_size, cfg: HeadConfig = HeadConfig()) -> list[Detection]:
    return nms(decode(cls_scores, reg_dists, centers, strides, image_size, cfg), cfg)


def write_jsonl(path, per_image: Iterable[tuple[object, Sequence[Detection]]]) -> int:
    n = 0
    with open(path, "w") as fh:
        for image_id, dets in per_image:
            for d in dets:
                fh.write(json.dumps(d.to_json(image_id)) + "\n")
                n += 1
    return n


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                if set(rec) != {"image_id", "box", "score", "class_id"} or len(rec["box"]) != 4:
                    raise ValueError(f"malformed detection record: {line}")
                out.append(rec)
    return out
