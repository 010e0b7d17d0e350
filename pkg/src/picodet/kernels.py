"""Backend selection for the hot kernels.

The compiled extension is preferred. Set ``PICODET_PURE_PYTHON=1`` to force
the numpy fallback (used by the test-suite to cross-check both paths).
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("PICODET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels_c as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        pass


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython', 'python') or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels_c

        return _kernels_c
    raise ValueError(f"unknown kernel backend {name!r}")


def box_iou_matrix(a, b):
    return _impl.box_iou_matrix(a, b)


def box_giou_matrix(a, b):
    return _impl.box_giou_matrix(a, b)


def batched_nms(boxes, scores, labels, iou_thr, max_out):
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    return _impl.batched_nms(boxes, np.asarray(scores, dtype=np.float64),
                             np.asarray(labels, dtype=np.int64), float(iou_thr), int(max_out))


def simota_select(cost, candidates, ks):
    return _impl.simota_select(np.ascontiguousarray(cost, dtype=np.float64),
                               np.ascontiguousarray(candidates, dtype=np.uint8),
                               np.ascontiguousarray(ks, dtype=np.int64))


def coco_match(ious, thresholds):
    return _impl.coco_match(np.ascontiguousarray(ious, dtype=np.float64),
                            np.asarray(thresholds, dtype=np.float64))
