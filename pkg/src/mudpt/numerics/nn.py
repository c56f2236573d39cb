"""Attention and normalization building blocks on top of :mod:`tensor`."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, layer_norm as _layer_norm, softmax as _softmax

LN_EPS = 1e-5


def softmax(v, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``; raises on empty input."""
    return _softmax(v, axis)


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    return _layer_norm(x, gamma, beta, eps)


@dataclass
class AttentionParams:
    """Query/key/value/output projections for ``heads`` heads of equal width.

    The per-head projections are the column blocks of the ``width x width``
    matrices; head ``h`` owns columns ``h*head_width:(h+1)*head_width``.
    """

    query: Tensor
    key: Tensor
    value: Tensor
    output: Tensor
    heads: int

    def __post_init__(self):
        w = self.width
        if self.heads < 1 or w % self.heads:
            raise ShapeError(f"width {w} not divisible by head count {self.heads}")
        for name in ("query", "key", "value", "output"):
            if getattr(self, name).shape != (w, w):
                raise ShapeError(f"{name} projection must be {w}x{w}, got {getattr(self, name).shape}")

    @property
    def width(self) -> int:
        return self.query.shape[0]

    @property
    def head_width(self) -> int:
        return self.width // self.heads

    @classmethod
    def init(cls, width: int, heads: int, rng: np.random.Generator, std: float = 0.02,
             requires_grad: bool = False) -> "AttentionParams":
        mats = [Tensor(rng.normal(0.0, std, (width, width)), requires_grad) for _ in range(4)]
        return cls(*mats, heads=heads)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}query": self.query, f"{prefix}key": self.key,
                f"{prefix}value": self.value, f"{prefix}output": self.output}


def _split_heads(t: Tensor, heads: int) -> Tensor:
    # (..., N, w) -> (..., heads, N, head_width)
    return t.reshape(t.shape[:-1] + (heads, t.shape[-1] // heads)).swapaxes(-2, -3)


def multi_head_attention(queries, keys, values, params: AttentionParams) -> Tensor:
    """Scaled dot-product attention, scale 1/sqrt(head_width), no masking.

    Inputs are ``(..., N, width)``; leading batch dimensions must agree.
    """
    queries, keys, values = as_tensor(queries), as_tensor(keys), as_tensor(values)
    w = params.width
    for label, t in (("queries", queries), ("keys", keys), ("values", values)):
        if t.ndim < 2 or t.shape[-1] != w:
            raise ShapeError(f"{label} must have trailing width {w}, got shape {t.shape}")
    if keys.shape[-2] != values.shape[-2]:
        raise ShapeError(f"keys ({keys.shape[-2]}) and values ({values.shape[-2]}) differ in length")

    h = params.heads
    q = _split_heads(queries @ params.query, h)
    k = _split_heads(keys @ params.key, h)
    v = _split_heads(values @ params.value, h)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(params.head_width))
    mixed = _softmax(scores, -1) @ v
    merged = mixed.swapaxes(-2, -3).reshape(queries.shape[:-1] + (w,))
    return merged @ params.output
