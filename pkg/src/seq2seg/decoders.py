"""Pixel-level decoders over encoder features: Naive, PUP and MLA.

All decoders take ``(N, L, C)`` sequences plus the patch grid size and return
``(N, H, W, K)`` logits with ``H = 16 * gh``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import Conv2d, ConvBNReLU, Module
from .tensor import Tensor

PUP_UPSAMPLES = 4


def sequence_to_map(z: Tensor, gh: int, gw: int) -> Tensor:
    """Row-major reshape of ``(N, L, C)`` to ``(N, gh, gw, C)``."""
    if z.ndim == 2:
        z = T.reshape(z, (1,) + z.shape)
    n, length, c = z.shape
    if gh * gw != length:
        raise T.TensorError(f"grid {gh}x{gw} does not hold a sequence of length {length}")
    return T.reshape(z, (n, gh, gw, c))


def map_to_sequence(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    return T.reshape(x, (n, h * w, c))


def mla_layers(depth: int, streams: int) -> list[int]:
    """Layers ``Le/M, 2Le/M, ..., Le`` feeding the MLA streams (1-based)."""
    if streams < 1 or depth % streams:
        raise ValueError(f"encoder depth {depth} is not divisible by {streams} MLA streams")
    step = depth // streams
    return [step * i for i in range(1, streams + 1)]


class NaiveHead(Module):
    """1x1 conv + BN + ReLU, 1x1 conv to K, one bilinear upsample to full size.

    The same 2-layer head serves as the auxiliary loss head.
    """

    def __init__(self, rng: np.random.Generator, channels: int, num_classes: int, width: int = 256):
        super().__init__()
        self.proj = self.child("proj", ConvBNReLU(rng, channels, width, 1))
        self.cls = self.child("cls", Conv2d(rng, width, num_classes, 1, bias=True))

    def __call__(self, z: Tensor, gh: int, gw: int, out_hw: tuple[int, int]) -> Tensor:
        x = self.cls(self.proj(sequence_to_map(z, gh, gw)))
        return T.bilinear_resize(x, *out_hw)


class PUPHead(Module):
    """Four rounds of 3x3 conv + BN + ReLU followed by 2x upsampling, then 1x1 to K."""

    def __init__(self, rng: np.random.Generator, channels: int, num_classes: int, width: int = 256):
        super().__init__()
        self.stages = [
            self.child(f"stage{i}", ConvBNReLU(rng, channels if i == 1 else width, width, 3))
            for i in range(1, PUP_UPSAMPLES + 1)
        ]
        self.cls = self.child("cls", Conv2d(rng, width, num_classes, 1, bias=True))
        self.upsample_count = 0
        self.upsampled: list[Tensor] = []

    def __call__(self, z: Tensor, gh: int, gw: int, out_hw: tuple[int, int]) -> Tensor:
        x = sequence_to_map(z, gh, gw)
        self.upsample_count = 0
        self.upsampled = []
        for stage in self.stages:
            x = stage(x)
            x = T.bilinear_resize(x, 2 * x.shape[1], 2 * x.shape[2])
            self.upsample_count += 1
            self.upsampled.append(x)
        assert self.upsample_count == PUP_UPSAMPLES
        x = self.cls(x)
        if x.shape[1:3] != tuple(out_hw):
            raise T.TensorError(f"PUP produced {x.shape[1:3]}, expected {tuple(out_hw)}")
        return x


class MLAStream(Module):
    def __init__(self, rng: np.random.Generator, channels: int):
        super().__init__()
        half, quarter = channels // 2, channels // 4
        self.reduce = self.child("reduce", ConvBNReLU(rng, channels, half, 1))
        self.fuse = self.child("fuse", ConvBNReLU(rng, half, half, 3))
        self.conv2 = self.child("conv2", ConvBNReLU(rng, half, half, 3))
        self.conv3 = self.child("conv3", ConvBNReLU(rng, half, quarter, 3))


class MLAHead(Module):
    """Multi-level aggregation over ``M`` uniformly spaced encoder layers.

    Per stream: 1x1 conv to C/2; top-down addition from the deeper neighbour
    (deepest stream first, so each stream receives the running sum of all
    deeper ones); 3x3 conv on the sum; 3x3 conv C/2 -> C/2; 3x3 conv
    C/2 -> C/4; 4x bilinear.  The streams are concatenated, classified by a
    1x1 conv and upsampled 4x to full resolution.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        channels: int,
        num_classes: int,
        layers: Sequence[int],
    ):
        super().__init__()
        if channels % 4:
            raise ValueError(f"MLA needs channels divisible by 4, got {channels}")
        self.layers = list(layers)
        self.streams = [self.child(f"stream{i}", MLAStream(rng, channels)) for i in range(1, len(layers) + 1)]
        self.cls = self.child("cls", Conv2d(rng, len(layers) * (channels // 4), num_classes, 1, bias=True))

    def __call__(self, feats: Sequence[Tensor], gh: int, gw: int, out_hw: tuple[int, int]) -> Tensor:
        if len(feats) != len(self.streams):
            raise ValueError(f"MLA expects {len(self.streams)} feature maps, got {len(feats)}")
        reduced = [s.reduce(sequence_to_map(z, gh, gw)) for s, z in zip(self.streams, feats)]
        fused: list[Optional[Tensor]] = [None] * len(reduced)
        acc = None
        for i in reversed(range(len(reduced))):
            acc = reduced[i] if acc is None else T.add(reduced[i], acc)
            fused[i] = acc
        outs = []
        for stream, x in zip(self.streams, fused):
            x = stream.conv3(stream.conv2(stream.fuse(x)))
            outs.append(T.bilinear_resize(x, 4 * gh, 4 * gw))
        x = self.cls(T.concat_channels(outs))
        return T.bilinear_resize(x, *out_hw)
