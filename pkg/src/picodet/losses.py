"""Classification-quality and box-regression losses.

Elementwise losses accept probabilities (clamped to ``[eps, 1 - eps]``) and
have ``*_with_logits`` twins used by training. Each probability-space loss
also ships a closed-form derivative (``*_grad``) so the gradient contract
can be checked independently of autograd.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossConfig:
    vfl_alpha: float = 0.75
    vfl_gamma: float = 2.0
    qfl_beta: float = 2.0
    giou_weight: float = 2.0
    dfl_weight: float = 0.25
    eps: float = 1e-9
    cls_loss: str = "vfl"

    def __post_init__(self):
        if min(self.giou_weight, self.dfl_weight, self.vfl_alpha) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.cls_loss not in ("vfl", "qfl"):
            raise ValueError(f"cls_loss must be 'vfl' or 'qfl', got {self.cls_loss!r}")


@dataclass(frozen=True)
class DistributionSpec:
    reg_max: int = 7

    def __post_init__(self):
        if self.reg_max < 1:
            raise ValueError("reg_max must be >= 1")

    @property
    def num_bins(self) -> int:
        return self.reg_max + 1

    @property
    def bins(self) -> np.ndarray:
        return np.arange(self.reg_max + 1, dtype=np.float64)


DEFAULT_LOSS = LossConfig()


def _t(x, like=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(x, dtype=dtype)


# -- classification ---------------------------------------------------------

def varifocal_loss(p, q, cfg: LossConfig = DEFAULT_LOSS) -> torch.Tensor:
    p, q = _t(p), _t(q, p)
    p = p.clamp(cfg.eps, 1 - cfg.eps)
    return _vfl_from_logs(torch.log(p), torch.log1p(-p), p, q, cfg)


def varifocal_loss_with_logits(logits: torch.Tensor, q: torch.Tensor, cfg: LossConfig = DEFAULT_LOSS) -> torch.Tensor:
    p = logits.sigmoid()
    return _vfl_from_logs(F.logsigmoid(logits), F.logsigmoid(-logits), p, q, cfg)


def _vfl_from_logs(log_p, log_1mp, p, q, cfg):
    pos = q * -(q * log_p + (1 - q) * log_1mp)
    neg = cfg.vfl_alpha * p.pow(cfg.vfl_gamma) * -log_1mp
    return torch.where(q > 0, pos, neg)


def varifocal_loss_grad(p, q, cfg: LossConfig = DEFAULT_LOSS):
    """d varifocal_loss / d p, valid in the open interval (eps, 1 - eps)."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    pos = -q * (q / p - (1 - q) / (1 - p))
    a, g = cfg.vfl_alpha, cfg.vfl_gamma
    neg = a * (g * p ** (g - 1) * -np.log1p(-p) + p ** g / (1 - p))
    return np.where(q > 0, pos, neg)


def quality_focal_loss(p, q, cfg: LossConfig = DEFAULT_LOSS) -> torch.Tensor:
    p, q = _t(p), _t(q, p)
    p = p.clamp(cfg.eps, 1 - cfg.eps)
    return _qfl_from_logs(torch.log(p), torch.log1p(-p), p, q, cfg)


def quality_focal_loss_with_logits(logits: torch.Tensor, q: torch.Tensor, cfg: LossConfig = DEFAULT_LOSS) -> torch.Tensor:
    return _qfl_from_logs(F.logsigmoid(logits), F.logsigmoid(-logits), logits.sigmoid(), q, cfg)


def _qfl_from_logs(log_p, log_1mp, p, q, cfg):
    scale = (q - p).abs().pow(cfg.qfl_beta)
    return scale * -((1 - q) * log_1mp + q * log_p)


def quality_focal_loss_grad(p, q, cfg: LossConfig = DEFAULT_LOSS):
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    b = cfg.qfl_beta
    bce = -((1 - q) * np.log1p(-p) + q * np.log(p))
    dbce = (1 - q) / (1 - p) - q / p
    d = p - q
    dscale = b * np.abs(d) ** (b - 1) * np.sign(d)
    return dscale * bce + np.abs(d) ** b * dbce


# -- regression -------------------------------------------------------------

def giou_elementwise(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """Row-wise GIoU of (N, 4) xyxy tensors; differentiable w.r.t. ``pred``."""
    area_p = (pred[:, 2] - pred[:, 0]).clamp(min=0) * (pred[:, 3] - pred[:, 1]).clamp(min=0)
    area_g = (gt[:, 2] - gt[:, 0]).clamp(min=0) * (gt[:, 3] - gt[:, 1]).clamp(min=0)
    lt = torch.maximum(pred[:, :2], gt[:, :2])
    rb = torch.minimum(pred[:, 2:], gt[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_p + area_g - inter
    iou = inter / (union + eps)
    elt = torch.minimum(pred[:, :2], gt[:, :2])
    erb = torch.maximum(pred[:, 2:], gt[:, 2:])
    ewh = (erb - elt).clamp(min=0)
    enclose = ewh[:, 0] * ewh[:, 1]
    return iou - (enclose - union) / (enclose + eps)


def giou_loss(pred, gt) -> torch.Tensor:
    pred = _t(pred)
    gt = _t(gt, pred)
    squeeze = pred.dim() == 1
    out = 1 - giou_elementwise(pred.reshape(-1, 4), gt.reshape(-1, 4))
    return out[0] if squeeze else out


def _dfl_bins(y, reg_max):
    left = np.floor(y).astype(np.int64)
    left = np.minimum(left, reg_max - 1)
    return left, left + 1


def distribution_focal_loss(dist, y, spec: DistributionSpec = DistributionSpec(), eps: float = 1e-9) -> torch.Tensor:
    """DFL on probability vectors ``dist`` (..., reg_max + 1) for targets ``y`` (...)."""
    dist = _t(dist)
    y = _t(y, dist)
    if torch.any(y < 0) or torch.any(y > spec.reg_max):
        raise ValueError(f"DFL target outside [0, {spec.reg_max}]")
    left = y.floor().long().clamp(max=spec.reg_max - 1)
    right = left + 1
    wl = right.to(y.dtype) - y
    wr = y - left.to(y.dtype)
    s = dist.clamp(min=eps)
    sl = s.gather(-1, left.unsqueeze(-1)).squeeze(-1)
    sr = s.gather(-1, right.unsqueeze(-1)).squeeze(-1)
    return -(wl * sl.log() + wr * sr.log())


def distribution_focal_loss_with_logits(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """DFL for logits (N, reg_max + 1) as the two-bin cross-entropy mix."""
    reg_max = logits.shape[-1] - 1
    left = y.floor().long().clamp(max=reg_max - 1)
    right = left + 1
    wl = right.to(y.dtype) - y
    wr = y - left.to(y.dtype)
    return (F.cross_entropy(logits, left, reduction="none") * wl
            + F.cross_entropy(logits, right, reduction="none") * wr)


def distribution_focal_loss_grad(dist, y, spec: DistributionSpec = DistributionSpec()):
    """d DFL / d dist for an unclamped, strictly positive ``dist`` vector."""
    dist = np.asarray(dist, dtype=np.float64)
    left, right = _dfl_bins(np.asarray(y, dtype=np.float64), spec.reg_max)
    grad = np.zeros_like(dist)
    grad[left] = -(right - y) / dist[left]
    grad[right] += -(y - left) / dist[right]
    return grad


def dfl_expectation(dist, spec: DistributionSpec = DistributionSpec()):
    if isinstance(dist, torch.Tensor):
        proj = torch.arange(spec.reg_max + 1, dtype=dist.dtype, device=dist.device)
        return (dist * proj).sum(-1)
    dist = np.asarray(dist, dtype=np.float64)
    return dist @ spec.bins


# -- composite --------------------------------------------------------------

class LossBreakdown(NamedTuple):
    total: torch.Tensor
    vfl: torch.Tensor
    giou: torch.Tensor
    dfl: torch.Tensor
    num_pos: int


def combine_terms(cls_term, giou_term, dfl_term, cfg: LossConfig = DEFAULT_LOSS):
    return cls_term + cfg.giou_weight * giou_term + cfg.dfl_weight * dfl_term


def detection_loss(cls_logits: torch.Tensor, reg_logits: torch.Tensor, centers: torch.Tensor,
                   strides: torch.Tensor, assignment, cfg: LossConfig = DEFAULT_LOSS,
                   spec: DistributionSpec = DistributionSpec()) -> LossBreakdown:
    """Composite detection loss over all anchors of a batch.

    Args:
        cls_logits: (N, num_classes) joint classification-quality logits.
        reg_logits: (N, 4, reg_max + 1) side distributions (pre-softmax).
        centers, strides: (N, 2) and (N,) anchor geometry in pixels.
        assignment: object exposing per-anchor numpy arrays ``matched_gt``,
            ``class_target``, ``quality`` and ``gt_boxes``.
        cfg: term weights; ``cfg.cls_loss`` picks VFL or QFL.

    The classification term covers every anchor (negatives with target 0);
    GIoU and DFL cover positives. Every term is divided by
    ``max(sum of positive quality targets, 1)``. The per-anchor DFL is the
    mean over the four sides.
    """
    dtype = cls_logits.dtype
    matched = torch.as_tensor(np.asarray(assignment.matched_gt))
    pos = matched >= 0
    num_pos = int(pos.sum())
    quality = torch.as_tensor(np.asarray(assignment.quality), dtype=dtype)
    target = torch.zeros_like(cls_logits)
    if num_pos:
        cls_t = torch.as_tensor(np.asarray(assignment.class_target))[pos]
        target[pos.nonzero().squeeze(1), cls_t] = quality[pos]
    cls_fn = varifocal_loss_with_logits if cfg.cls_loss == "vfl" else quality_focal_loss_with_logits
    cls_sum = cls_fn(cls_logits, target, cfg).sum()
    normalizer = max(float(quality[pos].sum()) if num_pos else 0.0, 1.0)
    zero = cls_logits.sum() * 0
    if num_pos:
        r = reg_logits[pos]
        c, s = centers[pos].to(dtype), strides[pos].to(dtype)
        gt = torch.as_tensor(np.asarray(assignment.gt_boxes)[pos.numpy()], dtype=dtype)
        pred_boxes = _decode(r, c, s, spec)
        giou_sum = (1 - giou_elementwise(pred_boxes, gt)).sum()
        dist_t = _encode(c, s, gt).clamp(0, spec.reg_max - 0.01)
        dfl = distribution_focal_loss_with_logits(r.reshape(-1, spec.reg_max + 1), dist_t.reshape(-1))
        dfl_sum = dfl.reshape(-1, 4).mean(1).sum()
    else:
        giou_sum = dfl_sum = zero
    vfl_term = cls_sum / normalizer
    giou_term = giou_sum / normalizer
    dfl_term = dfl_sum / normalizer
    total = combine_terms(vfl_term, giou_term, dfl_term, cfg)
    return LossBreakdown(total, vfl_term, giou_term, dfl_term, num_pos)


def _decode(reg_logits, centers, strides, spec):
    dist = dfl_expectation(reg_logits.softmax(-1), spec)
    s = strides[:, None]
    return torch.cat([centers - dist[:, :2] * s, centers + dist[:, 2:] * s], dim=1)


def _encode(centers, strides, boxes):
    s = strides[:, None]
    return torch.cat([(centers - boxes[:, :2]) / s, (boxes[:, 2:] - centers) / s], dim=1)
