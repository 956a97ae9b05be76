"""Transformer encoder over superpoint queries (self-attention only)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 6
    heads: int = 8
    model_dim: int = 64
    ffn_dim: int | None = None  # None -> 4 * model_dim
    use_positional_encoding: bool = False

    def __post_init__(self):
        if self.layers < 0:
            raise ValueError(f"layers must be >= 0, got {self.layers}")
        if self.heads < 1 or self.model_dim < 1:
            raise ValueError("heads and model_dim must be positive")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.ffn_dim is not None and self.ffn_dim < 1:
            raise ValueError("ffn_dim must be positive")

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.model_dim


@dataclass
class QuerySet:
    features: Tensor  # (M, C)
    mass_centers: np.ndarray  # (M, 3)

    def __post_init__(self):
        self.mass_centers = np.asarray(self.mass_centers, dtype=np.float64)
        if self.features.ndim != 2 or self.mass_centers.shape != (self.features.shape[0], 3):
            raise ValueError(
                f"query features {self.features.shape} and mass centers {self.mass_centers.shape} disagree"
            )

    @property
    def num_queries(self) -> int:
        return self.features.shape[0]

    @property
    def superpoint_index(self) -> np.ndarray:
        return np.arange(self.num_queries)


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.dim, self.heads = dim, heads
        self.child("q", Linear(dim, dim, rng))
        self.child("k", Linear(dim, dim, rng))
        self.child("v", Linear(dim, dim, rng))
        self.child("o", Linear(dim, dim, rng))

    def __call__(self, x: Tensor, return_weights: bool = False):
        m, c = x.shape
        if m < 1:
            raise ValueError("self-attention needs at least one query")
        h, dh = self.heads, c // self.heads

        def split(t):  # (M, C) -> (H, M, dh)
            return T.transpose(T.reshape(t, (m, h, dh)), (1, 0, 2))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        logits = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
        weights = T.softmax(logits, axis=-1)  # (H, M, M)
        ctx = T.matmul(weights, v)  # (H, M, dh)
        out = self.o(T.reshape(T.transpose(ctx, (1, 0, 2)), (m, c)))
        return (out, weights) if return_weights else out


def self_attention(queries: Tensor, attn: SelfAttention) -> tuple[Tensor, np.ndarray]:
    """Multi-head attention output and the (H, M, M) attention weights."""
    out, w = attn(queries, return_weights=True)
    return out, w.data


class EncoderBlock(Module):
    """Pre-norm block: x + Attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.child("norm1", LayerNorm(cfg.model_dim))
        self.child("attn", SelfAttention(cfg.model_dim, cfg.heads, rng))
        self.child("norm2", LayerNorm(cfg.model_dim))
        self.child("ffn1", Linear(cfg.model_dim, cfg.ffn_width, rng))
        self.child("ffn2", Linear(cfg.ffn_width, cfg.model_dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn2(T.relu(self.ffn1(self.norm2(x))))


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.blocks = [self.child(f"block{i}", EncoderBlock(cfg, rng)) for i in range(cfg.layers)]
        if cfg.use_positional_encoding:
            self.child("pos", Linear(3, cfg.model_dim, rng))

    def __call__(self, qs: QuerySet) -> Tensor:
        x = qs.features
        if x.shape[1] != self.cfg.model_dim:
            raise T.ShapeError("encode", x.shape, detail=f"model_dim={self.cfg.model_dim}")
        if not self.blocks:
            return x
        if self.cfg.use_positional_encoding:
            x = x + self.pos(T.tensor(qs.mass_centers))
        for block in self.blocks:
            x = block(x)
        return x


def encode(qs: QuerySet, encoder: Encoder) -> Tensor:
    return encoder(qs)
