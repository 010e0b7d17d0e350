"""CSP-PAN neck with channel unification and an optional extra top level."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConvBN, DPModule, init_weights


@dataclass
class NeckConfig:
    out_channels: int = 96
    num_csp_blocks: int = 1
    kernel: int = 5
    activation: str = "hswish"
    num_extra_levels: int = 1  # 1 -> four outputs (P3..P6), 0 -> three

    def __post_init__(self):
        if self.out_channels % 8:
            raise ValueError(f"neck out_channels must be divisible by 8, got {self.out_channels}")
        if self.kernel % 2 == 0:
            raise ValueError("neck kernel must be odd")


class DarknetBottleneck(nn.Module):
    def __init__(self, channels, kernel=5, act="hswish"):
        super().__init__()
        self.conv1 = ConvBN(channels, channels, 1, 1, act)
        self.conv2 = DPModule(channels, channels, kernel, 1, act)

    def forward(self, x):
        return self.conv2(self.conv1(x))


class CSPLayer(nn.Module):
    """Concat-fuse two equal-width maps: two 1x1 projections, bottlenecks on one, 1x1 merge."""

    def __init__(self, cin, cout, kernel=5, num_blocks=1, act="hswish"):
        super().__init__()
        mid = cout // 2
        self.main_conv = ConvBN(cin, mid, 1, 1, act)
        self.short_conv = ConvBN(cin, mid, 1, 1, act)
        self.blocks = nn.Sequential(*[DarknetBottleneck(mid, kernel, act) for _ in range(num_blocks)])
        self.final_conv = ConvBN(2 * mid, cout, 1, 1, act)

    def forward(self, x):
        return self.final_conv(torch.cat([self.blocks(self.main_conv(x)), self.short_conv(x)], dim=1))


class CSPPAN(nn.Module):
    def __init__(self, in_channels: Sequence[int], cfg: NeckConfig = NeckConfig()):
        super().__init__()
        self.cfg = cfg
        c, k, act, n = cfg.out_channels, cfg.kernel, cfg.activation, cfg.num_csp_blocks
        levels = len(in_channels)
        self.in_channels = list(in_channels)
        self.reduce = nn.ModuleList(ConvBN(ci, c, 1, 1, act) for ci in in_channels)
        self.top_down = nn.ModuleList(CSPLayer(2 * c, c, k, n, act) for _ in range(levels - 1))
        self.downsamples = nn.ModuleList(DPModule(c, c, k, 2, act) for _ in range(levels - 1))
        self.bottom_up = nn.ModuleList(CSPLayer(2 * c, c, k, n, act) for _ in range(levels - 1))
        self.extra = nn.ModuleList(DPModule(c, c, k, 2, act) for _ in range(cfg.num_extra_levels))
        self.num_outputs = levels + cfg.num_extra_levels
        init_weights(self)

    def unify_channels(self, feats):
        if len(feats) != len(self.reduce):
            raise ValueError(f"neck expects {len(self.reduce)} inputs, got {len(feats)}")
        return [r(f) for r, f in zip(self.reduce, feats)]

    def csp_fusion(self, layer: CSPLayer, a, b):
        if a.shape != b.shape:
            raise ValueError(f"cannot fuse maps of shapes {tuple(a.shape)} and {tuple(b.shape)}")
        return layer(torch.cat([a, b], dim=1))

    def forward(self, feats):
        x = self.unify_channels(feats)
        levels = len(x)
        inner = [x[-1]]
        for i, idx in enumerate(range(levels - 1, 0, -1)):
            low = x[idx - 1]
            up = F.interpolate(inner[0], size=low.shape[-2:], mode="nearest")
            inner.insert(0, self.csp_fusion(self.top_down[i], up, low))
        outs = [inner[0]]
        for i in range(levels - 1):
            down = self.downsamples[i](outs[-1])
            outs.append(self.csp_fusion(self.bottom_up[i], down, inner[i + 1]))
        for conv in self.extra:
            outs.append(conv(outs[-1]))
        return outs
