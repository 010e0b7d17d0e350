"""Learning-rate schedule and cycle-reset exponential moving average."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


def cosine_lr(step: int, total: int, lr0: float) -> float:
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return 0.5 * lr0 * (1 + math.cos(math.pi * step / total))


def lr_at(step: int, total: int, lr0: float, warmup_iters: int = 0, warmup_ratio: float = 0.1) -> float:
    """Cosine decay preceded by a linear warmup from ``warmup_ratio * lr``."""
    lr = cosine_lr(min(step, total), total, lr0)
    if step < warmup_iters:
        alpha = step / warmup_iters
        lr *= warmup_ratio + (1 - warmup_ratio) * alpha
    return lr


@dataclass
class EmaState:
    shadow: dict
    decay: float = 0.9998
    forget_step: int | None = None
    step: int = 0

    @classmethod
    def from_weights(cls, weights: dict, decay: float = 0.9998, forget_step: int | None = None) -> "EmaState":
        shadow = {k: (v.detach().clone() if isinstance(v, torch.Tensor) else v) for k, v in weights.items()}
        return cls(shadow, decay, forget_step)


def ema_update(state: EmaState, weights: dict) -> EmaState:
    """One EMA step; every ``forget_step`` steps the shadow is reset to ``weights``.

    Integer tensors (e.g. batch-norm counters) are copied, not averaged.
    ``state`` is updated in place and returned.
    """
    if weights.keys() != state.shadow.keys():
        raise ValueError("EMA shadow and weights have different entries")
    state.step += 1
    reset = state.forget_step is not None and state.step % state.forget_step == 0
    d = state.decay
    with torch.no_grad():
        for k, w in weights.items():
            s = state.shadow[k]
            if tuple(getattr(s, "shape", ())) != tuple(getattr(w, "shape", ())):
                raise ValueError(f"shape mismatch for {k}: {tuple(s.shape)} vs {tuple(w.shape)}")
            if isinstance(s, torch.Tensor):
                w = w.detach()
                if reset or not s.is_floating_point():
                    s.copy_(w)
                else:
                    s.mul_(d).add_(w, alpha=1 - d)
            else:
                state.shadow[k] = w if reset else d * s + (1 - d) * w
    return state
