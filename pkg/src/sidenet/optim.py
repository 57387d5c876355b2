"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class AdamWHyper:
    lr: float = 1e-3
    weight_decay: float = 0.15
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.exp_avg.values()) + sum(a.nbytes for a in self.exp_avg_sq.values())


def adamw_step(params, state: AdamWState, hyper: AdamWHyper, lr: float | None = None, no_decay=()) -> None:
    """One in-place AdamW update of every parameter that has a gradient.

    Decay is applied to the weights directly (``p -= lr * wd * p``), never added to
    the gradient. Names in ``no_decay`` skip the decay term.
    """
    lr = hyper.lr if lr is None else lr
    b1, b2 = hyper.betas
    state.step += 1
    bc1 = 1 - b1**state.step
    bc2 = 1 - b2**state.step
    for p in params:
        if p.grad is None:
            continue
        key = p.name or str(id(p))
        g = p.grad
        m = state.exp_avg.get(key)
        if m is None:
            m = state.exp_avg[key] = np.zeros_like(p.data)
            state.exp_avg_sq[key] = np.zeros_like(p.data)
        v = state.exp_avg_sq[key]
        if hyper.weight_decay and p.name not in no_decay:
            p.data *= 1 - lr * hyper.weight_decay
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        denom = np.sqrt(v / bc2) + hyper.eps
        p.data -= (lr / bc1) * m / denom


def cosine_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine decay to 0 at ``total_steps``."""
    if warmup_steps >= total_steps:
        raise ConfigError(f"warmup steps {warmup_steps} must be fewer than total steps {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside 0..{total_steps}")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
