"""Scaled dot-product and multi-head attention, plus a post-norm encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    add_bias,
    concat,
    dropout,
    layer_norm,
    matmul,
    relu,
    scale,
    softmax_rows,
    transpose,
)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two axes."""
    d_k = q.shape[-1]
    if d_k == 0:
        raise ValueError("key dimension must be positive")
    if k.shape[-1] != d_k:
        raise ShapeError(f"query {q.shape} and key {k.shape} widths differ")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key {k.shape} and value {v.shape} lengths differ")
    logits = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d_k))
    return matmul(softmax_rows(logits), v)


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """The softmax weight matrix alone, as plain arrays (for inspection)."""
    return softmax_rows(Tensor(q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1]))).data


@dataclass
class AttentionParams:
    """Per-head query/key/value projections and the output projection."""

    wq: list[Parameter]
    wk: list[Parameter]
    wv: list[Parameter]
    wo: Parameter

    def __post_init__(self):
        n = len(self.wq)
        if n == 0 or len(self.wk) != n or len(self.wv) != n:
            raise ValueError("need the same positive number of Q, K and V projections")
        d_model, d_k = self.wq[0].shape
        if n * d_k != d_model:
            raise ValueError(f"n_heads * d_k must equal d_model ({n} * {d_k} != {d_model})")
        for w in (*self.wq, *self.wk, *self.wv):
            if w.shape != (d_model, d_k):
                raise ShapeError(f"projection {w.name} has shape {w.shape}, expected {(d_model, d_k)}")
        if self.wo.shape != (n * d_k, d_model):
            raise ShapeError(f"output projection has shape {self.wo.shape}")

    @property
    def n_heads(self) -> int:
        return len(self.wq)

    @property
    def d_model(self) -> int:
        return self.wq[0].shape[0]

    @property
    def d_k(self) -> int:
        return self.wq[0].shape[1]

    def parameters(self) -> list[Parameter]:
        return [*self.wq, *self.wk, *self.wv, self.wo]

    @classmethod
    def init(cls, d_model: int, n_heads: int, rng: np.random.Generator, prefix: str = "attn"):
        if n_heads < 1 or d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        d_k = d_model // n_heads

        def proj(kind, i):
            return Parameter(glorot(rng, d_model, d_k), f"{prefix}.w{kind}.{i}")

        return cls(
            wq=[proj("q", i) for i in range(n_heads)],
            wk=[proj("k", i) for i in range(n_heads)],
            wv=[proj("v", i) for i in range(n_heads)],
            wo=Parameter(glorot(rng, n_heads * d_k, d_model), f"{prefix}.wo"),
        )


def multi_head(x: Tensor, params: AttentionParams, context: Tensor | None = None) -> Tensor:
    """Multi-head attention of queries from ``x`` over ``context``.

    With ``context=None`` this is self-attention. Every query position sees
    every key position; there is no causal mask.
    """
    context = x if context is None else context
    for t in (x, context):
        if t.shape[-1] != params.d_model:
            raise ShapeError(f"input width {t.shape[-1]} does not match d_model={params.d_model}")
    heads = [
        scaled_dot_attention(matmul(x, wq), matmul(context, wk), matmul(context, wv))
        for wq, wk, wv in zip(params.wq, params.wk, params.wv)
    ]
    merged = heads[0] if len(heads) == 1 else concat(heads, axis=-1)
    return matmul(merged, params.wo)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal position table of shape ``(length, d_model)``."""
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class EncoderLayer:
    """Self-attention and a ReLU feed-forward block, each followed by add & norm."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator, prefix: str = "enc"):
        self.attention = AttentionParams.init(d_model, n_heads, rng, f"{prefix}.attn")
        self.ff1 = Parameter(glorot(rng, d_model, d_ff), f"{prefix}.ff1.w")
        self.ff1_bias = Parameter(np.zeros(d_ff), f"{prefix}.ff1.b")
        self.ff2 = Parameter(glorot(rng, d_ff, d_model), f"{prefix}.ff2.w")
        self.ff2_bias = Parameter(np.zeros(d_model), f"{prefix}.ff2.b")
        self.norm1_gain = Parameter(np.ones(d_model), f"{prefix}.norm1.gain")
        self.norm1_shift = Parameter(np.zeros(d_model), f"{prefix}.norm1.shift")
        self.norm2_gain = Parameter(np.ones(d_model), f"{prefix}.norm2.gain")
        self.norm2_shift = Parameter(np.zeros(d_model), f"{prefix}.norm2.shift")

    def parameters(self) -> list[Parameter]:
        return [
            *self.attention.parameters(),
            self.ff1, self.ff1_bias, self.ff2, self.ff2_bias,
            self.norm1_gain, self.norm1_shift, self.norm2_gain, self.norm2_shift,
        ]

    def __call__(self, x: Tensor, dropout_rate: float = 0.0, rng=None, training: bool = False) -> Tensor:
        attended = dropout(multi_head(x, self.attention), dropout_rate, rng, training)
        x = layer_norm(add(x, attended), self.norm1_gain, self.norm1_shift)
        hidden = relu(add_bias(matmul(x, self.ff1), self.ff1_bias))
        ff = add_bias(matmul(hidden, self.ff2), self.ff2_bias)
        return layer_norm(add(x, ff), self.norm2_gain, self.norm2_shift)


def encode_sequence(
    x: Tensor,
    layers: list[EncoderLayer],
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Add sinusoidal positions to ``x`` of shape ``(..., T, d_model)`` and run the stack."""
    if not layers:
        raise ValueError("encoder needs at least one layer")
    t, d = x.shape[-2], x.shape[-1]
    pe = np.broadcast_to(positional_encoding(t, d), x.shape)
    h = add(x, Tensor(pe))
    for layer in layers:
        h = layer(h, dropout_rate, rng, training)
    return h
