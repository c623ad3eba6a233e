"""Adam with an inverse-square-root warmup schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .module import Parameter


def inverse_sqrt_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` over ``warmup`` steps, then peak*sqrt(warmup/step)."""
    if step <= 0:
        return 0.0
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    return peak * math.sqrt(max(warmup, 1) / step)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    warmup: int = 400
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        return inverse_sqrt_lr(self.step, self.lr, self.warmup)


def adam_step(state: OptimizerState, params: list[Parameter]) -> None:
    """One bias-corrected Adam update in place.  Gradients are left as they are."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
    state.step += 1
    lr = state.current_lr()
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {p.name} {p.shape}")
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s
    return total
