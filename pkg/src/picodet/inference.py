"""Image preprocessing and batched prediction on a trained detector."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .augment import resize
from .models.detector import PicoDet
from .models.head import HeadConfig
from .postprocess import Detection, postprocess

MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack uint8 HWC RGB images of one size into a normalized (B, 3, H, W) batch."""
    arr = np.stack([(im.astype(np.float32) / 255.0 - MEAN) / STD for im in images])
    return torch.from_numpy(arr.transpose(0, 3, 1, 2).copy())


def head_config(model: PicoDet, **overrides) -> HeadConfig:
    cfg = model.head.cfg
    fields = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    fields.update(overrides)
    return HeadConfig(**fields)


@torch.no_grad()
def predict(model: PicoDet, images: Sequence[np.ndarray], size: int, batch_size: int = 8,
            cfg: HeadConfig | None = None) -> list[list[Detection]]:
    """Detections per image, in the original image's pixel coordinates."""
    cfg = cfg or model.head.cfg
    was_training = model.training
    model.eval()
    results: list[list[Detection]] = []
    try:
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            resized = [resize(im, np.zeros((0, 4)), size)[0] for im in chunk]
            outs = model(to_tensor(resized))
            cls, reg = model.flatten(outs)
            centers, strides, _ = model.anchors(outs)
            scores = cls.sigmoid().double().numpy()
            dists = reg.double().softmax(-1).numpy()
            for b, im in enumerate(chunk):
                h, w = im.shape[:2]
                dets = postprocess(scores[b], dists[b], centers, strides, (size, size), cfg)
                sx, sy = w / size, h / size
                results.append([Detection(type(d.box)(d.box.x1 * sx, d.box.y1 * sy, d.box.x2 * sx, d.box.y2 * sy),
                                          d.score, d.class_id) for d in dets])
    finally:
        model.train(was_training)
    return results
