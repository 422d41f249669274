"""Pure transformer encoder: pre-norm multi-head self-attention and MLP blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Module, trunc_normal
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    hidden: int
    heads: int
    mlp_ratio: int = 4
    final_norm: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1 or self.heads < 1:
            raise ValueError(f"invalid encoder config {self}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


T_BASE = EncoderConfig(layers=12, hidden=768, heads=12)
T_LARGE = EncoderConfig(layers=24, hidden=1024, heads=16)
T_TINY = EncoderConfig(layers=4, hidden=64, heads=4)

PRESETS = {"T-Base": T_BASE, "T-Large": T_LARGE, "T-Tiny": T_TINY}


@dataclass
class EncoderFeatures:
    """Per-layer outputs ``Z^1 .. Z^Le`` (each ``(N, L, C)``), plus attention if kept.

    When the encoder applies a final layer norm, the last entry is the
    normalised ``Z^Le``.
    """

    layers: list[Tensor]
    attention: Optional[list[np.ndarray]] = field(default=None)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, l: int) -> Tensor:
        """1-based layer access, matching ``Z^l``."""
        if not 1 <= l <= len(self.layers):
            raise IndexError(f"layer {l} outside 1..{len(self.layers)}")
        return self.layers[l - 1]


def self_attention(z: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> tuple[Tensor, Tensor]:
    """One attention head on an ``(L, C)`` sequence.

    Returns the ``(L, d)`` head output and the ``(L, L)`` attention matrix.
    No residual is added here; see :func:`multi_head_attention`.
    """
    d = wq.shape[-1]
    q, k, v = T.matmul(z, wq), T.matmul(z, wk), T.matmul(z, wv)
    scores = T.scale(T.matmul(q, T.transpose(k, (1, 0))), 1.0 / math.sqrt(d))
    a = T.softmax_rows(scores)
    return T.matmul(a, v), a


class EncoderLayer(Module):
    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        super().__init__()
        c, hid = cfg.hidden, cfg.hidden * cfg.mlp_ratio
        self.cfg = cfg
        self.ln1 = self.child("ln1", LayerNorm(c))
        self.wq = self.param("wq", trunc_normal(rng, (c, c)))
        self.wk = self.param("wk", trunc_normal(rng, (c, c)))
        self.wv = self.param("wv", trunc_normal(rng, (c, c)))
        self.wo = self.param("wo", trunc_normal(rng, (c, c)))
        self.ln2 = self.child("ln2", LayerNorm(c))
        self.w1 = self.param("mlp1.weight", trunc_normal(rng, (c, hid)))
        self.b1 = self.param("mlp1.bias", np.zeros(hid))
        self.w2 = self.param("mlp2.weight", trunc_normal(rng, (hid, c)))
        self.b2 = self.param("mlp2.bias", np.zeros(c))
        self.rng = rng

    def head_weights(self, i: int) -> tuple[Tensor, Tensor, Tensor]:
        """Column slices of the fused projections belonging to head ``i`` (copies)."""
        d = self.cfg.head_dim
        cols = slice(i * d, (i + 1) * d)
        return tuple(Tensor(w.data[:, cols]) for w in (self.wq, self.wk, self.wv))

    def __call__(self, z: Tensor) -> tuple[Tensor, Tensor]:
        h, attn = multi_head_attention(z, self)
        return mlp_block(h, self), attn


def multi_head_attention(z: Tensor, w: EncoderLayer) -> tuple[Tensor, Tensor]:
    """``z + concat_heads(SA_i(LN(z))) @ W_O`` for an ``(N, L, C)`` batch.

    All heads are computed at once from the fused ``C x C`` projections; head
    ``i`` owns columns ``i*d:(i+1)*d``.  Returns the block output and the
    ``(N, m, L, L)`` attention tensor.
    """
    cfg = w.cfg
    n, length, c = z.shape
    m, d = cfg.heads, cfg.head_dim
    zn = w.ln1(z)

    def heads(x):
        return T.transpose(T.reshape(x, (n, length, m, d)), (0, 2, 1, 3))

    q, k, v = heads(T.matmul(zn, w.wq)), heads(T.matmul(zn, w.wk)), heads(T.matmul(zn, w.wv))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    a = T.softmax_rows(scores)
    a_drop = T.dropout(a, cfg.dropout, w.rng) if w.training else a
    o = T.reshape(T.transpose(T.matmul(a_drop, v), (0, 2, 1, 3)), (n, length, c))
    return T.add(z, T.matmul(o, w.wo)), a


def mlp_block(h: Tensor, w: EncoderLayer) -> Tensor:
    """``h + W2 · gelu(W1 · LN(h) + b1) + b2``."""
    x = T.gelu(T.add(T.matmul(w.ln2(h), w.w1), w.b1))
    if w.training:
        x = T.dropout(x, w.cfg.dropout, w.rng)
    return T.add(h, T.add(T.matmul(x, w.w2), w.b2))


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = [self.child(f"layer{l}", EncoderLayer(rng, cfg)) for l in range(1, cfg.layers + 1)]
        self.norm = self.child("norm", LayerNorm(cfg.hidden)) if cfg.final_norm else None

    def __call__(self, e: Tensor, keep_attention: bool = False) -> EncoderFeatures:
        return encoder_forward(e, self, keep_attention)


def encoder_forward(e: Tensor, encoder: Encoder, keep_attention: bool = False) -> EncoderFeatures:
    """Run every layer on the ``(N, L, C)`` embedding and collect all layer outputs."""
    cfg = encoder.cfg
    if len(encoder.layers) != cfg.layers:
        raise ValueError(f"config says {cfg.layers} layers, got {len(encoder.layers)} weight sets")
    if e.ndim == 2:
        e = T.reshape(e, (1,) + e.shape)
    if e.shape[-1] != cfg.hidden:
        raise T.TensorError(f"embedding width {e.shape[-1]} != hidden size {cfg.hidden}")
    feats, attn = [], [] if keep_attention else None
    z = e
    for layer in encoder.layers:
        z, a = layer(z)
        feats.append(z)
        if attn is not None:
            attn.append(a.data.copy())
    if encoder.norm is not None:
        feats[-1] = encoder.norm(feats[-1])
    return EncoderFeatures(feats, attn)
