"""3-D rotary positional encoding over (t, h, w).

The head dimension is split into three contiguous axis segments. Inside a
segment of width ``n``, channels ``(2i, 2i+1)`` form a pair rotated by
``pos_axis * base ** (-2i / n)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .grid import as_positions


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    axis_split: tuple[int, int, int] | None = None
    base: float = 10000.0

    def __post_init__(self):
        if self.axis_split is None:
            d = self.head_dim
            object.__setattr__(self, "axis_split", (d // 2, d // 4, d - d // 2 - d // 4))
        split = tuple(int(s) for s in self.axis_split)
        object.__setattr__(self, "axis_split", split)
        if len(split) != 3 or any(s <= 0 or s % 2 for s in split):
            raise ConfigError(f"axis split parts must be even and positive, got {split}")
        if sum(split) != self.head_dim:
            raise ConfigError(f"axis split {split} does not sum to head_dim {self.head_dim}")
        if self.base <= 1:
            raise ConfigError("rope base must exceed 1")


def axis_frequencies(n: int, base: float) -> np.ndarray:
    return base ** (-2.0 * np.arange(n // 2) / n)


def rope_angles(positions, cfg: RopeConfig) -> np.ndarray:
    """Rotation angle per token and channel pair, ``[L × d/2]`` float64."""
    pos = as_positions(positions).astype(np.float64)
    cols = [pos[:, a : a + 1] * axis_frequencies(n, cfg.base)[None, :] for a, n in enumerate(cfg.axis_split)]
    return np.concatenate(cols, axis=1)


def _rotate(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    dtype = np.result_type(x.dtype, np.float32)
    cos = np.cos(angles).astype(dtype)
    sin = np.sin(angles).astype(dtype)
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty(x.shape, dtype=dtype)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def apply_rope(x, positions, cfg: RopeConfig, inverse: bool = False) -> np.ndarray:
    """Rotate each token of ``x [..., L×d]`` by its 3-D position.

    ``inverse=True`` applies the negated angles, undoing a forward call.
    """
    x = np.asarray(x)
    if x.shape[-1] != cfg.head_dim:
        raise ConfigError(f"last extent {x.shape[-1]} does not match head_dim {cfg.head_dim}")
    angles = rope_angles(positions, cfg)
    if angles.shape[0] != x.shape[-2]:
        raise ValueError(f"{angles.shape[0]} positions for {x.shape[-2]} tokens")
    return _rotate(x, -angles if inverse else angles)


def rope_period_per_channel(cfg: RopeConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Angular period ``2π / θ_i`` of every rotary pair, one array per axis (t, h, w).

    Pairs whose period is shorter than the positional range seen at inference
    repeat their pattern, which is what the locality window guards against.
    """
    return tuple(2.0 * np.pi / axis_frequencies(n, cfg.base) for n in cfg.axis_split)


def rope_range_report(cfg: RopeConfig, train_extent: tuple[int, int, int], test_extent: tuple[int, int, int]):
    """Per axis, how many rotary pairs wrap within the test range but not the train range."""
    rows = []
    for name, periods, tr, te in zip("thw", rope_period_per_channel(cfg), train_extent, test_extent):
        wrap_train = int((periods < tr).sum())
        wrap_test = int((periods < te).sum())
        rows.append({"axis": name, "pairs": len(periods), "wrapping_train": wrap_train,
                     "wrapping_test": wrap_test, "newly_wrapping": wrap_test - wrap_train})
    return rows
