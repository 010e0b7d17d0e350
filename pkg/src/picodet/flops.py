"""Parameter and multiply-accumulate counting from a traced forward pass.

Counts are derived from each layer's *runtime* input/output shapes, so a
supernet child (sliced weights) is measured at its realized widths.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .models.layers import SlimConv2d


@dataclass
class Profile:
    params: int = 0
    conv_macs: int = 0
    elementwise: int = 0

    @property
    def macs(self) -> int:
        return self.conv_macs + self.elementwise

    @property
    def flops(self) -> int:
        """Floating-point operations, counting each multiply-accumulate as two."""
        return 2 * self.macs

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def mflops(self) -> float:
        return self.flops / 1e6

    @property
    def mmacs(self) -> float:
        return self.macs / 1e6


def conv_macs(k: int, cin: int, cout: int, hout: int, wout: int, groups: int = 1) -> int:
    return k * k * (cin // groups) * cout * hout * wout


def profile(model: nn.Module, input_size: int | tuple[int, int], batch_norm_elementwise: bool = False) -> Profile:
    """Trace one forward on a zero image and count params and MACs.

    Parameters are counted once per module even when the module runs more
    than once; MACs are accumulated per call. ``elementwise`` holds the
    SE-gate multiplies and activation-free adds are ignored.
    """
    h, w = (input_size, input_size) if isinstance(input_size, int) else input_size
    prof = Profile()
    seen: set[int] = set()
    hooks = []

    def conv_hook(m, inputs, output):
        cin = inputs[0].shape[1]
        cout, ho, wo = output.shape[1:]
        depthwise = getattr(m, "depthwise", m.groups == m.in_channels and m.groups > 1)
        groups = cin if depthwise else m.groups
        k = m.kernel_size[0]
        weight = k * k * (cin // groups) * cout
        prof.conv_macs += weight * ho * wo
        if id(m) not in seen:
            seen.add(id(m))
            prof.params += weight + (cout if m.bias is not None else 0)

    def bn_hook(m, inputs, output):
        if id(m) not in seen:
            seen.add(id(m))
            prof.params += 2 * inputs[0].shape[1] if m.affine else 0
        if batch_norm_elementwise:
            prof.elementwise += inputs[0].numel()

    def linear_hook(m, inputs, output):
        prof.conv_macs += m.in_features * m.out_features
        if id(m) not in seen:
            seen.add(id(m))
            prof.params += m.in_features * m.out_features + (m.out_features if m.bias is not None else 0)

    from .models.layers import SEModule

    def se_hook(m, inputs, output):
        prof.elementwise += output[0].numel()

    for mod in model.modules():
        if isinstance(mod, (nn.Conv2d, SlimConv2d)):
            hooks.append(mod.register_forward_hook(conv_hook))
        elif isinstance(mod, nn.BatchNorm2d):
            hooks.append(mod.register_forward_hook(bn_hook))
        elif isinstance(mod, nn.Linear):
            hooks.append(mod.register_forward_hook(linear_hook))
        elif isinstance(mod, SEModule):
            hooks.append(mod.register_forward_hook(se_hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, 3, h, w))
    finally:
        for hk in hooks:
            hk.remove()
        model.train(was_training)
    return prof


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
