"""Training schedules: tri-stage learning rate and parameter EMA."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class TrainSchedule:
    total_steps: int
    lr: float
    warmup_frac: float = 0.05
    hold_frac: float = 0.10
    decay_frac: float = 0.85
    final_lr_factor: float = 0.5
    ema_decay: float = 0.999
    weight_decay: float = 0.05

    def __post_init__(self):
        if abs(self.warmup_frac + self.hold_frac + self.decay_frac - 1.0) > 1e-12:
            raise ValueError("warmup/hold/decay fractions must sum to 1")


def anneal_lr(step, schedule):
    """Linear warmup from 0.1*lr, constant hold, cosine decay to final_lr_factor*lr."""
    total = schedule.total_steps
    s = min(max(step, 0), total) / total
    lr = schedule.lr
    if s <= schedule.warmup_frac:
        return 0.1 * lr + (lr - 0.1 * lr) * (s / schedule.warmup_frac)
    if s <= schedule.warmup_frac + schedule.hold_frac:
        return lr
    final = schedule.final_lr_factor * lr
    span = schedule.decay_frac
    progress = (s - schedule.warmup_frac - schedule.hold_frac) / span
    return final + (lr - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


def update_ema(shadow, params, decay):
    """shadow <- decay * shadow + (1 - decay) * params, key by key, in place."""
    for name, value in params.items():
        shadow[name] = decay * shadow[name] + (1.0 - decay) * value
    return shadow
