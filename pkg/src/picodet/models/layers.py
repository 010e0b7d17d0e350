"""Building blocks shared by the backbone, neck and head.

Convolutions and batch norms here are *slimmable*: they consume however
many input channels arrive and emit ``active_out`` channels (default: all),
slicing the stored weights. A child network of the NAS supernet is
therefore just the supernet with smaller ``active_out`` values; every
child weight is a view of the supernet tensor.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

ACTIVATIONS = ("hswish", "leakyrelu", "relu")


def make_act(name: str | None) -> nn.Module:
    if name is None:
        return nn.Identity()
    if name == "hswish":
        return nn.Hardswish()
    if name == "leakyrelu":
        return nn.LeakyReLU(0.1)
    if name == "relu":
        return nn.ReLU()
    raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def round_to_8(x: float) -> int:
    """Nearest multiple of 8, ties upward, never below 8."""
    return max(8, int(x / 8 + 0.5) * 8)


def channel_shuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    b, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible by {groups} groups")
    return x.view(b, groups, c // groups, h, w).transpose(1, 2).reshape(b, c, h, w)


class SlimConv2d(nn.Conv2d):
    """Conv2d that slices its weight to the incoming / active channel counts."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, depthwise=False, bias=False):
        groups = in_channels if depthwise else 1
        if depthwise and out_channels != in_channels:
            raise ValueError("depthwise conv needs out_channels == in_channels")
        super().__init__(in_channels, out_channels, kernel_size, stride, kernel_size // 2, groups=groups, bias=bias)
        self.depthwise = depthwise
        self.active_out: int | None = None

    def forward(self, x):
        cin = x.shape[1]
        if self.depthwise:
            cout, groups = cin, cin
            weight = self.weight[:cin]
        else:
            cout = self.out_channels if self.active_out is None else self.active_out
            groups = 1
            weight = self.weight[:cout, :cin]
        if cout == self.out_channels and cin == self.in_channels:
            weight, groups = self.weight, self.groups
        bias = None if self.bias is None else self.bias[:cout]
        return F.conv2d(x, weight, bias, self.stride, self.padding, 1, groups)


class SlimBatchNorm2d(nn.BatchNorm2d):
    def forward(self, x):
        c = x.shape[1]
        if c == self.num_features:
            return super().forward(x)
        momentum = self.momentum or 0.0
        if self.training:
            self.num_batches_tracked.add_(1)
            if self.momentum is None:  # cumulative moving average
                momentum = 1.0 / float(self.num_batches_tracked)
        return F.batch_norm(x, self.running_mean[:c], self.running_var[:c], self.weight[:c], self.bias[:c],
                            self.training, momentum, self.eps)


class ConvBN(nn.Module):
    def __init__(self, cin, cout, k=1, stride=1, act="hswish", depthwise=False):
        super().__init__()
        self.conv = SlimConv2d(cin, cout, k, stride, depthwise=depthwise)
        self.bn = SlimBatchNorm2d(cout)
        self.act = make_act(act)

    def set_active_out(self, c: int | None):
        self.conv.active_out = c

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class DPModule(nn.Module):
    """Depthwise k x k then pointwise 1 x 1, each with BN + activation."""

    def __init__(self, cin, cout, k=5, stride=1, act="hswish"):
        super().__init__()
        self.dw = ConvBN(cin, cin, k, stride, act, depthwise=True)
        self.pw = ConvBN(cin, cout, 1, 1, act)

    def forward(self, x):
        return self.pw(self.dw(x))


class SEModule(nn.Module):
    """Squeeze-excitation gate with ReLU and hard-sigmoid."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        self.reduction = reduction
        self.fc1 = SlimConv2d(channels, channels // reduction, 1, bias=True)
        self.fc2 = SlimConv2d(channels // reduction, channels, 1, bias=True)

    def forward(self, x):
        c = x.shape[1]
        self.fc1.active_out = max(c // self.reduction, 1)
        self.fc2.active_out = c
        s = F.adaptive_avg_pool2d(x, 1)
        s = F.hardsigmoid(self.fc2(F.relu(self.fc1(s))))
        return x * s


class GhostModule(nn.Module):
    """Half the outputs from a 1x1 conv, the other half a cheap depthwise map of them."""

    def __init__(self, cin, cout, act="hswish", cheap_kernel=3, cheap_act=None):
        super().__init__()
        if cout % 2:
            raise ValueError(f"ghost module needs an even out_channels, got {cout}")
        self.primary = ConvBN(cin, cout // 2, 1, 1, act)
        self.cheap = ConvBN(cout // 2, cout // 2, cheap_kernel, 1, cheap_act, depthwise=True)

    def set_active_out(self, c: int | None):
        self.primary.set_active_out(None if c is None else c // 2)

    def forward(self, x):
        y = self.primary(x)
        return torch.cat([y, self.cheap(y)], dim=1)


def init_weights(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0, 0.01)
            nn.init.zeros_(m.bias)
