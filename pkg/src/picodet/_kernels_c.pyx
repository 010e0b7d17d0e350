# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Mirrors ``_kernels_py`` one-for-one."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


cdef inline double _area(const double[:, ::1] b, Py_ssize_t i) noexcept nogil:
    cdef double w = b[i, 2] - b[i, 0]
    cdef double h = b[i, 3] - b[i, 1]
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def box_iou_matrix(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double iw, ih, inter, union, aa
    with nogil:
        for i in range(n):
            aa = _area(a, i)
            for j in range(m):
                iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
                ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
                if iw <= 0 or ih <= 0:
                    continue
                inter = iw * ih
                union = aa + _area(b, j) - inter
                if union > 0:
                    out[i, j] = min(inter / union, 1.0)
    return out_arr


def box_giou_matrix(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double iw, ih, inter, union, aa, ew, eh, enclose, overlap
    with nogil:
        for i in range(n):
            aa = _area(a, i)
            for j in range(m):
                iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
                ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
                inter = iw * ih if (iw > 0 and ih > 0) else 0.0
                union = aa + _area(b, j) - inter
                overlap = inter / union if union > 0 else 0.0
                ew = max(a[i, 2], b[j, 2]) - min(a[i, 0], b[j, 0])
                eh = max(a[i, 3], b[j, 3]) - min(a[i, 1], b[j, 1])
                enclose = ew * eh if (ew > 0 and eh > 0) else 0.0
                if enclose > 0:
                    out[i, j] = overlap - (enclose - union) / enclose
                else:
                    out[i, j] = overlap
    return out_arr


def batched_nms(const double[:, ::1] boxes, scores, labels, double iou_thr, Py_ssize_t max_out):
    cdef Py_ssize_t n = boxes.shape[0], pos, q, i, j, kept = 0
    score_arr = np.asarray(scores, dtype=np.float64)
    # lexsort: last key is primary -> (-score, index)
    order_arr = np.lexsort((np.arange(n), -score_arr)).astype(np.int64)
    cdef const long long[::1] order = order_arr
    cdef const long long[::1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    supp_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] supp = supp_arr
    keep_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] keep = keep_arr
    cdef double iw, ih, inter, union, ai
    with nogil:
        for pos in range(n):
            i = order[pos]
            if supp[i]:
                continue
            keep[kept] = i
            kept += 1
            if kept >= max_out:
                break
            ai = _area(boxes, i)
            for q in range(pos + 1, n):
                j = order[q]
                if supp[j] or lab[j] != lab[i]:
                    continue
                iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
                ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
                if iw <= 0 or ih <= 0:
                    continue
                inter = iw * ih
                union = ai + _area(boxes, j) - inter
                if union > 0 and inter / union >= iou_thr:
                    supp[j] = 1
    return keep_arr[:kept].copy()


def simota_select(const double[:, ::1] cost, const unsigned char[:, ::1] candidates, const long long[::1] ks):
    cdef Py_ssize_t na = cost.shape[0], ng = cost.shape[1], g, a, r, nc
    matched_arr = np.full(na, -1, dtype=np.int64)
    cdef long long[::1] matched = matched_arr
    best_arr = np.full(na, INFINITY, dtype=np.float64)
    cdef double[::1] best = best_arr
    cdef long long[::1] chosen
    cdef double c
    for g in range(ng):
        if ks[g] <= 0:
            continue
        idx = np.flatnonzero(np.asarray(candidates[:, g]))
        nc = idx.shape[0]
        if nc == 0:
            continue
        col = np.asarray(cost[:, g])[idx]
        chosen = np.ascontiguousarray(idx[np.argsort(col, kind="stable")[: ks[g]]], dtype=np.int64)
        for r in range(chosen.shape[0]):
            a = chosen[r]
            c = cost[a, g]
            if c < best[a]:
                best[a] = c
                matched[a] = g
    return matched_arr


def coco_match(const double[:, ::1] ious, thresholds):
    cdef const double[::1] thr_v = np.ascontiguousarray(thresholds, dtype=np.float64)
    cdef Py_ssize_t nt = thr_v.shape[0], nd = ious.shape[0], ng = ious.shape[1], t, d, g
    out_arr = np.full((nt, nd), -1, dtype=np.int64)
    cdef long long[:, ::1] out = out_arr
    taken_arr = np.zeros(ng, dtype=np.uint8)
    cdef unsigned char[::1] taken = taken_arr
    cdef double best_iou, thr
    cdef long long best_g
    with nogil:
        for t in range(nt):
            thr = min(thr_v[t], 1 - 1e-10)
            for g in range(ng):
                taken[g] = 0
            for d in range(nd):
                best_iou = thr
                best_g = -1
                for g in range(ng):
                    if taken[g]:
                        continue
                    if ious[d, g] >= best_iou and (best_g == -1 or ious[d, g] > best_iou):
                        best_iou = ious[d, g]
                        best_g = g
                if best_g >= 0:
                    taken[best_g] = 1
                    out[t, d] = best_g
    return out_arr
