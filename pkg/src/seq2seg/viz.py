"""Diagnostic images: attention maps, attention rollout, position-embedding similarity, features.

Every function returns a uint8 array; min-max normalisation is per image and a
zero-range image renders as mid-gray (128).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

MID_GRAY = 128


def to_gray(values: np.ndarray) -> np.ndarray:
    """Min-max normalise to 0..255 (rounded); constant input gives 128 everywhere."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.full(v.shape, MID_GRAY, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _stack(stack: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Head-averaged ``(L, L)`` maps from per-layer ``(m, L, L)`` or ``(1, m, L, L)`` arrays."""
    out = []
    for a in stack:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 4:
            if a.shape[0] != 1:
                raise ValueError(f"attention stack must hold a single image, got batch {a.shape[0]}")
            a = a[0]
        if a.ndim == 2:
            a = a[None]
        out.append(a.mean(axis=0))
    return out


def attention_rollout(stack: Sequence[np.ndarray], num_layers: int | None = None, return_stages: bool = False):
    """Cumulative product of residual-corrected, head-averaged attention.

    Per layer ``A = (mean_heads(attn) + I) / 2`` with rows renormalised, and
    ``R = A_Le ... A_2 A_1`` so row ``i`` of ``R`` says how much token ``i`` of
    the last layer draws on each input patch.
    """
    layers = _stack(stack)
    if not layers:
        raise ValueError("empty attention stack")
    if num_layers is not None and len(layers) != num_layers:
        raise ValueError(f"attention stack has {len(layers)} layers, expected {num_layers}")
    n = layers[0].shape[0]
    eye = np.eye(n)
    rollout = eye
    stages = []
    for a in layers:
        a = (a + eye) / 2.0
        a = a / a.sum(axis=-1, keepdims=True)
        rollout = a @ rollout
        stages.append(rollout)
    return (rollout, stages) if return_stages else rollout


def point_attention_map(
    stack: Sequence[np.ndarray], layer: int, point: tuple[int, int], grid: tuple[int, int]
) -> np.ndarray:
    """Head-averaged attention row of grid cell ``point`` at 1-based ``layer``, as a ``gh x gw`` image."""
    gh, gw = grid
    r, c = point
    if not (0 <= r < gh and 0 <= c < gw):
        raise ValueError(f"point {point} outside the {gh}x{gw} grid")
    layers = _stack(stack)
    if not 1 <= layer <= len(layers):
        raise ValueError(f"layer {layer} outside 1..{len(layers)}")
    row = layers[layer - 1][r * gw + c]
    return to_gray(row.reshape(gh, gw))


def rollout_point_map(rollout: np.ndarray, point: tuple[int, int], grid: tuple[int, int]) -> np.ndarray:
    gh, gw = grid
    r, c = point
    if not (0 <= r < gh and 0 <= c < gw):
        raise ValueError(f"point {point} outside the {gh}x{gw} grid")
    return to_gray(rollout[r * gw + c].reshape(gh, gw))


def cosine_table(pos: np.ndarray) -> np.ndarray:
    """``(L, L)`` cosine similarities between rows of a ``(gh, gw, C)`` table; zero-norm pairs give 0."""
    gh, gw, c = pos.shape
    flat = np.asarray(pos, dtype=np.float64).reshape(gh * gw, c)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = flat / safe[:, None]
    sim = unit @ unit.T
    zero = norms == 0
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    return sim


def pos_embed_similarity(pos: np.ndarray, border: int = 1) -> np.ndarray:
    """Tile ``(r, c)`` shows the similarity of embedding ``(r, c)`` to every grid cell.

    Tiles are ``gh x gw`` each, laid out on a ``gh x gw`` mosaic separated by
    ``border`` pixels of black.  Each tile is min-max normalised on its own,
    so the self-similarity cell is 255.
    """
    gh, gw, _ = pos.shape
    sim = cosine_table(pos)
    th, tw = gh + border, gw + border
    out = np.zeros((gh * th - border, gw * tw - border), dtype=np.uint8)
    for r in range(gh):
        for c in range(gw):
            tile = to_gray(sim[r * gw + c].reshape(gh, gw))
            out[r * th : r * th + gh, c * tw : c * tw + gw] = tile
    return out


def similarity_tile(pos: np.ndarray, r: int, c: int) -> np.ndarray:
    gh, gw, _ = pos.shape
    return to_gray(cosine_table(pos)[r * gw + c].reshape(gh, gw))


def pca1(fmap: np.ndarray) -> np.ndarray:
    """Projection of each pixel onto the first principal component of its channels.

    The eigenvector sign is fixed so its largest-magnitude entry is positive.
    """
    h, w, c = fmap.shape
    x = np.asarray(fmap, dtype=np.float64).reshape(-1, c)
    x = x - x.mean(axis=0)
    if c == 1:
        return x.reshape(h, w)
    cov = x.T @ x / max(len(x) - 1, 1)
    _, vecs = np.linalg.eigh(cov)
    v = vecs[:, -1]
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return (x @ v).reshape(h, w)


def render_feature(fmap: np.ndarray, reduction: str = "mean") -> np.ndarray:
    """Reduce an ``(H, W, C)`` map over channels and render it as 8-bit gray."""
    fmap = np.asarray(fmap)
    if fmap.ndim == 4:
        fmap = fmap[0]
    if reduction == "mean":
        values = fmap.astype(np.float64).mean(axis=-1)
    elif reduction == "pca1":
        values = pca1(fmap)
    else:
        raise ValueError(f"unknown reduction {reduction!r}; use 'mean' or 'pca1'")
    return to_gray(values)


def colorize(seg: np.ndarray, num_classes: int) -> np.ndarray:
    """Class map to an RGB image with evenly spaced hues; class 0 is black."""
    from .data import class_palette

    pal = class_palette(max(num_classes, 2))
    out = np.zeros(seg.shape + (3,), dtype=np.uint8)
    valid = seg < len(pal)
    out[valid] = pal[seg[valid]]
    return out
