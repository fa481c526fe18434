"""Parameterised layers built on the tensor primitives."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as nt
from .tensor import Tensor, parameter


class Module:
    """Parameter container; submodules and parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            if k not in state:
                continue
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise nt.ShapeError(f"{k}: checkpoint shape {arr.shape} vs parameter shape {p.shape}")
            p.data = arr.astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float32, zero_init: bool = False):
        bound = 1.0 / math.sqrt(n_in)
        w = np.zeros((n_in, n_out), dtype) if zero_init else _uniform(rng, (n_in, n_out), bound, dtype)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(n_out, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, dtype=np.float32, scale: float = 0.02):
        self.weight = parameter((rng.standard_normal((n, dim)) * scale).astype(dtype))

    def forward(self, ids: np.ndarray) -> Tensor:
        return nt.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim, dtype))
        self.shift = parameter(np.zeros(dim, dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return nt.layer_norm(x, self.eps) * self.gain + self.shift


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, bias: bool = True, dtype=np.float32):
        bound = 1.0 / math.sqrt(cin * k * k)
        self.weight = parameter(_uniform(rng, (k, k, cin, cout), bound, dtype))
        self.bias = parameter(np.zeros(cout, dtype)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        y = nt.conv2d(x, self.weight, self.stride, self.padding)
        return y + self.bias if self.bias is not None else y


class MultiHeadAttention(Module):
    """Scaled dot-product attention; ``causal`` adds a lower-triangular mask."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32,
                 kv_dim: int | None = None):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(kv_dim, dim, rng, dtype=dtype)
        self.v = Linear(kv_dim, dim, rng, dtype=dtype)
        self.o = Linear(dim, dim, rng, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, context: Tensor | None = None, causal: bool = False) -> Tensor:
        context = x if context is None else context
        b, n, d = x.shape
        q = self._split(self.q(x))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // self.heads))
        if causal:
            m = context.shape[1]
            blocked = np.triu(np.ones((n, m), dtype=bool), k=1)
            scores = scores + np.where(blocked, -1e9, 0.0).astype(scores.dtype)
        attn = nt.softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.o(out)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(nt.gelu(self.fc1(x)))
