"""Latent token grids and their positional bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class Position3D(NamedTuple):
    t: int
    h: int
    w: int


@dataclass(frozen=True)
class TokenGrid:
    """Tokens of ``frames × height × width`` latent positions in (t, h, w) raster order.

    ``t0`` offsets the frame index so a grid can describe a slice of a longer
    stream while keeping absolute positions.
    """

    frames: int
    height: int
    width: int
    t0: int = 0

    def __post_init__(self):
        if min(self.frames, self.height, self.width) < 1 or self.t0 < 0:
            raise ValueError(f"invalid grid {self}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.frames, self.height, self.width)

    @property
    def tokens_per_frame(self) -> int:
        return self.height * self.width

    def __len__(self) -> int:
        return self.frames * self.height * self.width

    def positions(self) -> np.ndarray:
        """Integer array ``[L×3]`` of absolute (t, h, w) per token."""
        t, h, w = np.meshgrid(
            np.arange(self.t0, self.t0 + self.frames),
            np.arange(self.height),
            np.arange(self.width),
            indexing="ij",
        )
        return np.stack([t.ravel(), h.ravel(), w.ravel()], axis=1).astype(np.int64)

    def frame_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.t0, self.t0 + self.frames), self.tokens_per_frame)

    def index(self, t: int, h: int, w: int) -> int:
        return ((t - self.t0) * self.height + h) * self.width + w


def as_positions(positions) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.int64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ValueError(f"positions must be [L×3], got {pos.shape}")
    if (pos < 0).any():
        raise ValueError("positions must be non-negative")
    return pos
