"""Semi-convolutional pixel embeddings."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Conv2d, ConvGNReLU, Module, Parameter, RngState


def coordinate_grid(height: int, width: int, dtype=None) -> np.ndarray:
    """(H, W, 2) grid; channel 0 is x (column), channel 1 is y (row), both in [-1, 1]."""
    dtype = dtype or T.get_default_dtype()
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    grid = np.empty((height, width, 2), dtype=dtype)
    grid[..., 0] = xs[None, :]
    grid[..., 1] = ys[:, None]
    return grid


def add_coordinates(embeddings, grid: np.ndarray | None = None):
    """Add the coordinate grid to channels 0 and 1 of (..., H, W, D) embeddings."""
    emb = T._lift(embeddings)
    h, w, d = emb.shape[-3:]
    if grid is None:
        grid = coordinate_grid(h, w, emb.dtype)
    if grid.shape != (h, w, 2) or d < 2:
        raise T.ShapeError("semiconv_embed", emb.shape, grid.shape)
    offset = np.zeros((h, w, d), dtype=emb.dtype)
    offset[..., :2] = grid
    return emb + offset


class SemiConvHead(Module):
    """3x3 Conv-GN-ReLU block, a 1x1 conv to D_zeta scaled by a scalar gate, plus pixel coordinates."""

    def __init__(self, c_in: int, rng: RngState, width: int = 64, out_dim: int = 8):
        self.block = ConvGNReLU(c_in, width, 3, rng)
        self.out = Conv2d(width, out_dim, 1, rng)
        self.gate = Parameter(np.ones(()))

    def forward(self, features):
        return add_coordinates(self.gate * self.out(self.block(features)))


def semiconv_embed(features, head: SemiConvHead):
    return head(features)


def zero_init_embedding_head(head: SemiConvHead) -> None:
    """Zero the gate and output bias so initial embeddings equal the coordinate grid.

    The 1x1 weights keep their random init. Zeroing them instead would leave
    channels 2+ constant across pixels, where every distance kernel has zero
    gradient, so they could never move. The gate receives gradient through
    channels 0 and 1 and opens after the first update.
    """
    head.gate.data[...] = 0
    head.out.bias.data[...] = 0
