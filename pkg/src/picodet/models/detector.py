"""Full detector assembly: backbone -> CSP-PAN -> GFL head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from ..geometry import grid_arrays
from .csppan import CSPPAN, NeckConfig
from .esnet import ESNet, EsNetConfig, ShuffleNetV2
from .head import GFLHead, HeadConfig


class FeatureMap(NamedTuple):
    channels: int
    height: int
    width: int
    stride: int


def describe(feats: Sequence[torch.Tensor], strides: Sequence[int]) -> list[FeatureMap]:
    """FeatureMapSet metadata for a list of (B, C, H, W) tensors."""
    return [FeatureMap(f.shape[1], f.shape[2], f.shape[3], s) for f, s in zip(feats, strides)]


@dataclass
class DetectorConfig:
    num_classes: int = 80
    backbone: str = "esnet"
    width_multiplier: float = 0.75
    stage_base_channels: Sequence[int] = (128, 256, 512)
    stage_block_counts: Sequence[int] = (3, 7, 3)
    channel_ratios: Sequence[float] | None = None
    activation: str = "hswish"
    neck_out_channels: int | None = 96
    num_csp_blocks: int = 1
    neck_kernel: int = 5
    num_levels: int = 4
    dp_count: int = 2
    reg_max: int = 7
    coupled_head: bool = True
    share_head: bool = False
    score_threshold: float = 0.025
    nms_iou: float = 0.6
    max_detections: int = 100


class PicoDet(nn.Module):
    def __init__(self, cfg: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.cfg = cfg
        if cfg.backbone == "esnet":
            self.backbone = ESNet(EsNetConfig(cfg.stage_base_channels, cfg.stage_block_counts, cfg.width_multiplier,
                                              cfg.channel_ratios, cfg.activation))
        elif cfg.backbone == "shufflenetv2":
            self.backbone = ShuffleNetV2(cfg.width_multiplier, cfg.activation)
        else:
            raise ValueError(f"unknown backbone {cfg.backbone!r}")
        in_ch = self.backbone.out_channels
        extra = cfg.num_levels - len(in_ch)
        if extra < 0:
            raise ValueError(f"num_levels {cfg.num_levels} < backbone outputs {len(in_ch)}")
        neck_c = cfg.neck_out_channels or min(in_ch)
        self.neck = CSPPAN(in_ch, NeckConfig(neck_c, cfg.num_csp_blocks, cfg.neck_kernel, cfg.activation, extra))
        self.head = GFLHead(neck_c, cfg.num_levels, HeadConfig(
            num_classes=cfg.num_classes, dp_count=cfg.dp_count, reg_max=cfg.reg_max,
            share_weights_across_levels=cfg.share_head, coupled=cfg.coupled_head,
            score_threshold=cfg.score_threshold, nms_iou=cfg.nms_iou, max_detections=cfg.max_detections,
            activation=cfg.activation))
        bb_strides = list(self.backbone.strides)
        self.strides = bb_strides + [bb_strides[-1] * 2 ** (i + 1) for i in range(extra)]

    def forward(self, x):
        return self.head(self.neck(self.backbone(x)))

    def flatten(self, outs):
        """Concatenate levels: cls (B, A, C) logits and reg (B, A, 4, reg_max + 1) logits."""
        nc = self.cfg.num_classes
        nb = self.cfg.reg_max + 1
        cls = torch.cat([c.flatten(2).transpose(1, 2) for c, _ in outs], dim=1)
        reg = torch.cat([r.flatten(2).transpose(1, 2) for _, r in outs], dim=1)
        return cls.reshape(cls.shape[0], -1, nc), reg.reshape(reg.shape[0], -1, 4, nb)

    def anchors(self, outs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        shapes = [tuple(c.shape[-2:]) for c, _ in outs]
        return grid_arrays(shapes, self.strides)


def build_detector(**overrides) -> PicoDet:
    return PicoDet(DetectorConfig(**overrides))
