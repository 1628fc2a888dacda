"""AdamW, gradient clipping and the warmup/cosine schedules."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .core import Tensor


def cosine_schedule(start: float, end: float, step: int, total: int) -> float:
    """Half-cosine from ``start`` (step 0) to ``end`` (step ``total``)."""
    if total <= 0:
        return end
    t = min(max(step / total, 0.0), 1.0)
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * t))


def warmup_cosine(step: int, total: int, warmup: int, peak: float, final: float = 0.0) -> float:
    """Linear ramp to ``peak`` over ``warmup`` steps, then cosine decay to ``final``."""
    if step < warmup:
        return peak * (step + 1) / warmup
    return cosine_schedule(peak, final, step - warmup, max(total - warmup, 1))


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if total > max_norm:
        s = max_norm / (total + 1e-6)
        for p in params:
            p.grad = p.grad * p.grad.dtype.type(s)
    return total


class AdamW:
    """Adam with decoupled weight decay.

    ``no_decay`` names parameters (biases, norm gains, tokens) that skip the
    weight decay term.
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-3, weight_decay=0.05,
                 betas=(0.9, 0.999), eps=1e-8, no_decay=()):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.no_decay = set(no_decay)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            dt = p.data.dtype.type
            m, v = self.m[k], self.v[k]
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * g * g
            if self.weight_decay and k not in self.no_decay:
                p.data *= dt(1 - self.lr * self.weight_decay)
            p.data -= dt(self.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
