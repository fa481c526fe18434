from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], p: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``p.data``."""
    g = np.zeros_like(p.data, dtype=np.float64)
    flat = p.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f().item()
        flat[i] = old - h
        down = f().item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                   reference: Callable[[], Tensor] | None = None) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|).

    ``f`` is re-evaluated from the current parameter values on every call and
    must return a scalar tensor.  ``reference`` replaces ``f`` on the numeric
    side, for losses whose backward pass is a deliberate surrogate (e.g. a
    straight-through estimator) of a smooth reference function.
    """
    for p in params:
        p.grad = None
    f().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = numeric_grad(reference or f, p, h)
        rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst
