"""Pure-Python/numpy implementations of the hot kernels.

Loaded when the compiled ``_kernels_c`` extension is unavailable or when
``PICODET_PURE_PYTHON=1``. Semantics must match ``_kernels_c.pyx`` exactly,
including tie-breaking.
"""
import numpy as np


def _areas(b):
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def _inter_union(a, b):
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = _areas(a)[:, None] + _areas(b)[None, :] - inter
    return inter, union


def box_iou_matrix(a, b):
    inter, union = _inter_union(a, b)
    out = np.zeros_like(inter)
    ok = union > 0
    out[ok] = inter[ok] / union[ok]
    return np.minimum(out, 1.0)


def box_giou_matrix(a, b):
    inter, union = _inter_union(a, b)
    overlap = np.zeros_like(inter)
    ok = union > 0
    overlap[ok] = inter[ok] / union[ok]
    lt = np.minimum(a[:, None, :2], b[None, :, :2])
    rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    enclose = wh[..., 0] * wh[..., 1]
    out = overlap.copy()
    ok = enclose > 0
    out[ok] = overlap[ok] - (enclose[ok] - union[ok]) / enclose[ok]
    return out


def batched_nms(boxes, scores, labels, iou_thr, max_out):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    areas = _areas(boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        if len(keep) >= max_out:
            break
        for j in order[pos + 1:]:
            if suppressed[j] or labels[j] != labels[i]:
                continue
            iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            if iw <= 0 or ih <= 0:
                continue
            inter = iw * ih
            union = areas[i] + areas[j] - inter
            if union > 0 and inter / union >= iou_thr:
                suppressed[j] = True
    return np.asarray(keep, dtype=np.int64)


def simota_select(cost, candidates, ks):
    num_anchors, num_gt = cost.shape
    matched = np.full(num_anchors, -1, dtype=np.int64)
    best = np.full(num_anchors, np.inf)
    for g in range(num_gt):
        idx = np.flatnonzero(candidates[:, g])
        if len(idx) == 0 or ks[g] <= 0:
            continue
        # stable sort on cost keeps lower anchor index first among ties
        chosen = idx[np.argsort(cost[idx, g], kind="stable")[: ks[g]]]
        for a in chosen:
            c = cost[a, g]
            if c < best[a]:
                best[a] = c
                matched[a] = g
    return matched


def coco_match(ious, thresholds):
    """Greedy COCO matching; detections must already be sorted by score."""
    num_t = len(thresholds)
    num_d, num_g = ious.shape
    dt_match = np.full((num_t, num_d), -1, dtype=np.int64)
    for t in range(num_t):
        thr = min(thresholds[t], 1 - 1e-10)
        taken = np.zeros(num_g, dtype=bool)
        for d in range(num_d):
            best_iou = thr
            best_g = -1
            for g in range(num_g):
                if taken[g]:
                    continue
                if ious[d, g] >= best_iou and (best_g == -1 or ious[d, g] > best_iou):
                    best_iou = ious[d, g]
                    best_g = g
            if best_g >= 0:
                taken[best_g] = True
                dt_match[t, d] = best_g
    return dt_match
