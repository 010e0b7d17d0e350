"""Coupled GFL-style head: joint class-quality scores plus side distributions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .layers import DPModule, init_weights


@dataclass
class HeadConfig:
    num_classes: int = 80
    dp_count: int = 2
    reg_max: int = 7
    kernel: int = 5
    share_weights_across_levels: bool = False
    coupled: bool = True
    score_threshold: float = 0.025
    nms_iou: float = 0.6
    max_detections: int = 100
    pre_nms_top_k: int = 1000
    activation: str = "hswish"

    def __post_init__(self):
        if self.dp_count < 1:
            raise ValueError("dp_count must be >= 1")
        if self.reg_max < 1:
            raise ValueError("reg_max must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.num_classes + 4 * (self.reg_max + 1)


class _Tower(nn.Sequential):
    def __init__(self, channels, n, kernel, act):
        super().__init__(*[DPModule(channels, channels, kernel, 1, act) for _ in range(n)])


class GFLHead(nn.Module):
    """Per level: ``dp_count`` DP modules, then one 1x1 conv split into cls / reg.

    With ``coupled=False`` the classification and regression outputs get
    separate towers (a structural stub for the decoupled-head ablation).
    """

    def __init__(self, channels: int, num_levels: int, cfg: HeadConfig = HeadConfig()):
        super().__init__()
        self.cfg = cfg
        self.num_levels = num_levels
        n_towers = 1 if cfg.share_weights_across_levels else num_levels
        act = cfg.activation
        self.towers = nn.ModuleList(_Tower(channels, cfg.dp_count, cfg.kernel, act) for _ in range(n_towers))
        if cfg.coupled:
            self.preds = nn.ModuleList(nn.Conv2d(channels, cfg.out_channels, 1) for _ in range(n_towers))
        else:
            self.reg_towers = nn.ModuleList(_Tower(channels, cfg.dp_count, cfg.kernel, act) for _ in range(n_towers))
            self.cls_preds = nn.ModuleList(nn.Conv2d(channels, cfg.num_classes, 1) for _ in range(n_towers))
            self.reg_preds = nn.ModuleList(nn.Conv2d(channels, 4 * (cfg.reg_max + 1), 1) for _ in range(n_towers))
        init_weights(self)
        prior = -math.log((1 - 0.01) / 0.01)
        for m in (self.preds if cfg.coupled else self.cls_preds):
            nn.init.normal_(m.weight, std=0.01)
            with torch.no_grad():
                m.bias[: cfg.num_classes].fill_(prior)

    def forward(self, feats):
        """Returns per-level ``(cls_logits, reg_logits)`` tensors."""
        if len(feats) != self.num_levels:
            raise ValueError(f"head expects {self.num_levels} levels, got {len(feats)}")
        nc = self.cfg.num_classes
        outs = []
        for i, f in enumerate(feats):
            j = 0 if self.cfg.share_weights_across_levels else i
            if self.cfg.coupled:
                y = self.preds[j](self.towers[j](f))
                outs.append((y[:, :nc], y[:, nc:]))
            else:
                outs.append((self.cls_preds[j](self.towers[j](f)), self.reg_preds[j](self.reg_towers[j](f))))
        return outs


def head_forward(head: GFLHead, feats):
    """Per-level ``(cls_scores, reg_dists)`` with sigmoid applied to the scores."""
    return [(c.sigmoid(), r) for c, r in head(feats)]
