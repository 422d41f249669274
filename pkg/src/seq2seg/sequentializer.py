"""Image-to-sequence conversion: patch grids, patch projection, position embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, trunc_normal
from .tensor import Tensor

PATCH_SIZE = 16


@dataclass(frozen=True)
class PatchGrid:
    """Flattened patches of a batch of images.

    ``cells`` has shape ``(N, gh * gw, P * P * 3)``; the grid is flattened
    row-major and each patch is flattened row-major (rows, columns, channels).
    """

    cells: Tensor
    gh: int
    gw: int
    patch: int

    @property
    def length(self) -> int:
        return self.gh * self.gw


def _as_batch(img) -> Tensor:
    t = T.as_tensor(img)
    if t.ndim == 3:
        t = T.reshape(t, (1,) + t.shape)
    if t.ndim != 4 or t.shape[-1] != 3:
        raise T.TensorError(f"expected an (H, W, 3) or (N, H, W, 3) image, got {t.shape}")
    return t


def patchify(img, patch: int = PATCH_SIZE) -> PatchGrid:
    """Cut an image (or batch) into non-overlapping ``patch x patch`` cells.

    Dimensions that are not multiples of ``patch`` are rejected; nothing is
    padded here.
    """
    x = _as_batch(img)
    n, h, w, c = x.shape
    if h % patch or w % patch:
        raise T.TensorError(f"image size {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = T.reshape(x, (n, gh, patch, gw, patch, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return PatchGrid(T.reshape(x, (n, gh * gw, patch * patch * c)), gh, gw, patch)


def unpatchify(grid: PatchGrid) -> Tensor:
    n = grid.cells.shape[0]
    p = grid.patch
    x = T.reshape(grid.cells, (n, grid.gh, grid.gw, p, p, 3))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n, grid.gh * p, grid.gw * p, 3))


def interpolate_pos_embed(pos: Tensor, new_gh: int, new_gw: int) -> Tensor:
    """Resample a ``(gh, gw, C)`` position table to a new grid, align-corners bilinear."""
    gh, gw, c = pos.shape
    if (gh, gw) == (new_gh, new_gw):
        return pos
    out = T.bilinear_resize(T.reshape(pos, (1, gh, gw, c)), new_gh, new_gw)
    return T.reshape(out, (new_gh, new_gw, c))


def embed_sequence(grid: PatchGrid, weight: Tensor, bias: Tensor, pos: Tensor) -> Tensor:
    """Row ``i`` of the result is ``patch_i @ weight + bias + pos_i``; shape ``(N, L, C)``."""
    if pos.shape[:2] != (grid.gh, grid.gw):
        raise T.TensorError(
            f"position table grid {pos.shape[:2]} does not match patch grid {(grid.gh, grid.gw)}"
        )
    c = pos.shape[2]
    e = T.add(T.matmul(grid.cells, weight), bias)
    return T.add(e, T.reshape(pos, (grid.length, c)))


class PatchEmbedding(Module):
    """Linear patch projection plus a learned position table.

    The table is sized for ``grid`` (the training crop); inputs on other grids
    use a bilinearly resampled copy.  Resampling weights are cached per
    (source, target) size by :func:`seq2seg.tensor.interp_matrix`; the table
    itself is trainable, so the resampled values are recomputed each call.
    """

    def __init__(self, rng: np.random.Generator, hidden: int, grid: tuple[int, int], patch: int = PATCH_SIZE):
        super().__init__()
        self.patch = patch
        self.weight = self.param("proj.weight", trunc_normal(rng, (patch * patch * 3, hidden)))
        self.bias = self.param("proj.bias", np.zeros(hidden))
        self.pos = self.param("pos", trunc_normal(rng, (grid[0], grid[1], hidden)))

    def __call__(self, img) -> tuple[Tensor, int, int]:
        grid = patchify(img, self.patch)
        pos = interpolate_pos_embed(self.pos, grid.gh, grid.gw)
        return embed_sequence(grid, self.weight, self.bias, pos), grid.gh, grid.gw
