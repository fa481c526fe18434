"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class CosineSchedule:
    initial: float
    total_steps: int
    kind: str = "cosine"
    warmup: int = 0

    def __post_init__(self):
        if self.kind != "cosine":
            raise ValueError(f"unsupported schedule kind {self.kind!r}")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")

    def rate(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.initial * (step + 1) / self.warmup
        step = min(max(step, 0), self.total_steps)
        return 0.5 * self.initial * (1.0 + math.cos(math.pi * step / self.total_steps))


@dataclass
class AdamW:
    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.96
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None, grads: list[np.ndarray | None] | None = None) -> None:
        """Apply one update.  Raises before touching any state if a gradient is non-finite."""
        lr = self.lr if lr is None else lr
        if grads is None:
            grads = [p.grad for p in self.params]
        for g in grads:
            if g is not None and not np.isfinite(g).all():
                raise NonFiniteError("non-finite gradient; AdamW step rejected")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total
