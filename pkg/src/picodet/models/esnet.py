"""Enhanced ShuffleNet backbone and the plain ShuffleNetV2 baseline."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConvBN, GhostModule, SEModule, channel_shuffle, init_weights, round_to_8

STEM_CHANNELS = 24


@dataclass
class EsNetConfig:
    stage_base_channels: Sequence[int] = (128, 256, 512)
    stage_block_counts: Sequence[int] = (3, 7, 3)
    width_multiplier: float = 1.0
    per_block_ratios: Sequence[float] | None = None
    activation: str = "hswish"
    se_reduction: int = 4
    num_classes: int | None = None  # classification variant when set
    classifier_channels: int = 1024

    def __post_init__(self):
        if len(self.stage_base_channels) != len(self.stage_block_counts):
            raise ValueError("one block count per stage is required")
        if min(self.stage_block_counts) < 1:
            raise ValueError("block counts must be >= 1")
        if self.per_block_ratios is not None and len(self.per_block_ratios) != self.num_blocks:
            raise ValueError(f"expected {self.num_blocks} block ratios, got {len(self.per_block_ratios)}")

    @property
    def num_blocks(self) -> int:
        return sum(self.stage_block_counts)

    @property
    def stage_channels(self) -> list[int]:
        return [round_to_8(c * self.width_multiplier) for c in self.stage_base_channels]

    def block_mid_channels(self, ratios: Sequence[float] | None = None) -> list[int]:
        ratios = ratios if ratios is not None else (self.per_block_ratios or [1.0] * self.num_blocks)
        mids = []
        i = 0
        for c, n in zip(self.stage_channels, self.stage_block_counts):
            for _ in range(n):
                mids.append(round_to_8(ratios[i] * c))
                i += 1
        return mids


class ESBlockS1(nn.Module):
    """Stride-1 ES block: split, ghost + SE + 1x1 on one half, concat, shuffle."""

    def __init__(self, channels, mid, act="hswish", se_reduction=4):
        super().__init__()
        half = channels // 2
        self.mid = self.active_mid = mid
        self.ghost = GhostModule(half, mid, act)
        self.se = SEModule(mid, se_reduction)
        self.pw = ConvBN(mid, half, 1, 1, act)

    def set_mid(self, mid: int | None):
        self.active_mid = self.mid if mid is None else mid
        self.ghost.set_active_out(mid)

    def forward(self, x):
        x1, x2 = x.chunk(2, dim=1)
        x2 = self.pw(self.se(self.ghost(x2)))
        return channel_shuffle(torch.cat([x1, x2], dim=1), 2)


class ESBlockS2(nn.Module):
    """Stride-2 ES block: two downsampling branches, shuffle, then DW+PW fusion."""

    def __init__(self, cin, cout, mid, act="hswish", se_reduction=4):
        super().__init__()
        half = cout // 2
        self.mid = self.active_mid = mid
        self.b1_dw = ConvBN(cin, cin, 3, 2, None, depthwise=True)
        self.b1_pw = ConvBN(cin, half, 1, 1, act)
        self.b2_pw = ConvBN(cin, mid // 2, 1, 1, act)
        self.b2_dw = ConvBN(mid // 2, mid // 2, 3, 2, None, depthwise=True)
        self.se = SEModule(mid // 2, se_reduction)
        self.b2_linear = ConvBN(mid // 2, half, 1, 1, act)
        self.fuse_dw = ConvBN(cout, cout, 3, 1, act, depthwise=True)
        self.fuse_pw = ConvBN(cout, cout, 1, 1, act)

    def set_mid(self, mid: int | None):
        self.active_mid = self.mid if mid is None else mid
        self.b2_pw.set_active_out(None if mid is None else mid // 2)

    def forward(self, x):
        a = self.b1_pw(self.b1_dw(x))
        b = self.b2_linear(self.se(self.b2_dw(self.b2_pw(x))))
        out = channel_shuffle(torch.cat([a, b], dim=1), 2)
        return self.fuse_pw(self.fuse_dw(out))


class ESNet(nn.Module):
    def __init__(self, cfg: EsNetConfig = EsNetConfig()):
        super().__init__()
        self.cfg = cfg
        act = cfg.activation
        self.stem = ConvBN(3, STEM_CHANNELS, 3, 2, act)
        self.pool = nn.MaxPool2d(3, 2, 1)
        self.out_channels = cfg.stage_channels
        mids = cfg.block_mid_channels()
        self.stages = nn.ModuleList()
        cin = STEM_CHANNELS
        i = 0
        for cout, n in zip(self.out_channels, cfg.stage_block_counts):
            blocks = [ESBlockS2(cin, cout, mids[i], act, cfg.se_reduction)]
            i += 1
            for _ in range(n - 1):
                blocks.append(ESBlockS1(cout, mids[i], act, cfg.se_reduction))
                i += 1
            self.stages.append(nn.Sequential(*blocks))
            cin = cout
        n_stages = len(self.out_channels)
        self.strides = [2 ** (k + 3) for k in range(n_stages)]
        if cfg.num_classes is not None:
            self.conv_last = ConvBN(cin, cfg.classifier_channels, 1, 1, act)
            self.fc = nn.Linear(cfg.classifier_channels, cfg.num_classes)
        init_weights(self)

    @property
    def blocks(self) -> list[nn.Module]:
        return [b for stage in self.stages for b in stage]

    def set_ratios(self, ratios: Sequence[float] | None) -> None:
        """Activate a child width per block (``None`` restores full width)."""
        blocks = self.blocks
        if ratios is None:
            for b in blocks:
                b.set_mid(None)
            return
        if len(ratios) != len(blocks):
            raise ValueError(f"expected {len(blocks)} ratios, got {len(ratios)}")
        for b, m in zip(blocks, self.cfg.block_mid_channels(ratios)):
            if m > b.mid:
                raise ValueError(f"ratio asks for {m} channels but the block holds {b.mid}")
            b.set_mid(m)

    def forward(self, x):
        if min(x.shape[-2:]) < 32:
            raise ValueError(f"input {tuple(x.shape[-2:])} smaller than 32x32")
        x = self.pool(self.stem(x))
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        if self.cfg.num_classes is not None:
            x = F.adaptive_avg_pool2d(self.conv_last(x), 1).flatten(1)
            return self.fc(x)
        return feats


# -- ShuffleNetV2 baseline ------------------------------------------------

SHUFFLENET_V2_CHANNELS = {0.5: (48, 96, 192), 1.0: (116, 232, 464), 1.5: (176, 352, 704), 2.0: (244, 488, 976)}


class SNBlockS1(nn.Module):
    def __init__(self, channels, act):
        super().__init__()
        half = channels // 2
        self.branch = nn.Sequential(ConvBN(half, half, 1, 1, act), ConvBN(half, half, 3, 1, None, depthwise=True),
                                    ConvBN(half, half, 1, 1, act))

    def forward(self, x):
        x1, x2 = x.chunk(2, dim=1)
        return channel_shuffle(torch.cat([x1, self.branch(x2)], dim=1), 2)


class SNBlockS2(nn.Module):
    def __init__(self, cin, cout, act):
        super().__init__()
        half = cout // 2
        self.branch1 = nn.Sequential(ConvBN(cin, cin, 3, 2, None, depthwise=True), ConvBN(cin, half, 1, 1, act))
        self.branch2 = nn.Sequential(ConvBN(cin, half, 1, 1, act), ConvBN(half, half, 3, 2, None, depthwise=True),
                                     ConvBN(half, half, 1, 1, act))

    def forward(self, x):
        return channel_shuffle(torch.cat([self.branch1(x), self.branch2(x)], dim=1), 2)


class ShuffleNetV2(nn.Module):
    def __init__(self, width_multiplier=1.0, activation="leakyrelu", block_counts=(4, 8, 4)):
        super().__init__()
        if width_multiplier not in SHUFFLENET_V2_CHANNELS:
            raise ValueError(f"ShuffleNetV2 width must be one of {sorted(SHUFFLENET_V2_CHANNELS)}")
        self.out_channels = list(SHUFFLENET_V2_CHANNELS[width_multiplier])
        self.stem = ConvBN(3, STEM_CHANNELS, 3, 2, activation)
        self.pool = nn.MaxPool2d(3, 2, 1)
        self.stages = nn.ModuleList()
        cin = STEM_CHANNELS
        for cout, n in zip(self.out_channels, block_counts):
            blocks = [SNBlockS2(cin, cout, activation)] + [SNBlockS1(cout, activation) for _ in range(n - 1)]
            self.stages.append(nn.Sequential(*blocks))
            cin = cout
        self.strides = [8, 16, 32]
        init_weights(self)

    def forward(self, x):
        x = self.pool(self.stem(x))
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats
