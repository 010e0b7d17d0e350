"""Training-time augmentation: horizontal flip, random crop, multi-scale resize."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    crop_prob: float = 0.5
    crop_min_scale: float = 0.3
    max_crop_retries: int = 50
    input_sizes: Sequence[int] = (320,)
    min_box_size: float = 1.0


def hflip(image: np.ndarray, boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = image.shape[1]
    out = boxes.copy()
    out[:, 0] = w - boxes[:, 2]
    out[:, 2] = w - boxes[:, 0]
    return image[:, ::-1].copy(), out


def resize(image: np.ndarray, boxes: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    h, w = image.shape[:2]
    if (h, w) == (size, size):
        return image, boxes
    img = np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR))
    scale = np.array([size / w, size / h, size / w, size / h])
    return img, boxes * scale


def _try_crop(image, boxes, labels, rng, cfg):
    h, w = image.shape[:2]
    for _ in range(cfg.max_crop_retries):
        cw = int(round(w * rng.uniform(cfg.crop_min_scale, 1.0)))
        ch = int(round(h * rng.uniform(cfg.crop_min_scale, 1.0)))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        cx = (boxes[:, 0] + boxes[:, 2]) / 2
        cy = (boxes[:, 1] + boxes[:, 3]) / 2
        keep = (cx > x0) & (cx < x0 + cw) & (cy > y0) & (cy < y0 + ch)
        if not keep.any():
            continue
        b = boxes[keep] - np.array([x0, y0, x0, y0], dtype=np.float64)
        b[:, 0::2] = np.clip(b[:, 0::2], 0, cw)
        b[:, 1::2] = np.clip(b[:, 1::2], 0, ch)
        big = ((b[:, 2] - b[:, 0]) >= cfg.min_box_size) & ((b[:, 3] - b[:, 1]) >= cfg.min_box_size)
        if not big.any():
            continue
        return image[y0:y0 + ch, x0:x0 + cw].copy(), b[big], labels[keep][big]
    return None


def augment(image: np.ndarray, boxes: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig(), size: int | None = None):
    """Return ``(image, boxes, labels)`` after flip, crop and resize.

    The crop keeps boxes whose centers fall inside it (clipped to the crop)
    and is retried up to ``max_crop_retries`` times before being skipped.
    ``size`` overrides the random draw from ``cfg.input_sizes`` so a whole
    batch can share one scale.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.asarray(labels, dtype=np.int64)
    if rng.random() < cfg.flip_prob:
        image, boxes = hflip(image, boxes)
    if rng.random() < cfg.crop_prob and len(boxes):
        cropped = _try_crop(image, boxes, labels, rng, cfg)
        if cropped is not None:
            image, boxes, labels = cropped
    if size is None:
        size = int(cfg.input_sizes[int(rng.integers(len(cfg.input_sizes)))])
    image, boxes = resize(image, boxes, size)
    ok = ((boxes[:, 2] - boxes[:, 0]) > 0) & ((boxes[:, 3] - boxes[:, 1]) > 0)
    return image, boxes[ok], labels[ok]
