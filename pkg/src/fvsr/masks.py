"""Attention-mask families: segment, causal, spatial locality, and their conjunction.

All builders return dense boolean arrays ``[queries × keys]``. Builders that
take positions accept an optional ``key_positions`` so the same rule can be
evaluated between a query slice and a longer key set (the streaming case).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, DimensionError
from .grid import as_positions


def validate_segments(labels) -> np.ndarray:
    seg = np.asarray(labels, dtype=np.int64)
    if seg.ndim != 1:
        raise ValueError("segment labels must be 1-D")
    if seg.size and (seg.min() < 0 or set(np.unique(seg).tolist()) != set(range(seg.max() + 1))):
        raise ValueError("segment ids must be contiguous non-negative integers")
    return seg


def build_segment_mask(labels) -> np.ndarray:
    """``allowed[i, j]`` iff tokens i and j share a segment."""
    seg = validate_segments(labels)
    return seg[:, None] == seg[None, :]


@dataclass(frozen=True)
class CausalSpec:
    """Frame index per token; ``lookahead`` future frames are also visible."""

    frames: tuple
    lookahead: int = 0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.int64)
        if f.ndim != 1:
            raise ValueError("frames must be 1-D")
        if f.size > 1 and (np.diff(f) < 0).any():
            raise ValueError("frame indices must be non-decreasing in token order")
        if self.lookahead < 0:
            raise ValueError("lookahead must be >= 0")
        object.__setattr__(self, "frames", tuple(f.tolist()))


def build_causal_mask(spec: CausalSpec, L: int | None = None, key_frames=None) -> np.ndarray:
    """``allowed[i, j]`` iff ``frame(j) <= frame(i) + lookahead``; a frame fully inter-attends."""
    qf = np.asarray(spec.frames, dtype=np.int64)
    if L is not None and qf.size != L:
        raise DimensionError(f"{qf.size} frame labels for {L} tokens")
    kf = qf if key_frames is None else np.asarray(key_frames, dtype=np.int64)
    return kf[None, :] <= qf[:, None] + spec.lookahead


class BoundaryMode(str, Enum):
    PRESERVED = "boundary_preserved"
    TRUNCATED = "boundary_truncated"


@dataclass(frozen=True)
class LocalityWindow:
    """Spatial window of ``extent_h × extent_w`` latent tokens inside a ``frame_h × frame_w`` frame.

    Truncated windows are centred on the query and clipped at the frame edge.
    Preserved windows slide inward at the edges and always span the full
    extent. Neither mode restricts time.
    """

    mode: BoundaryMode
    extent_h: int
    extent_w: int
    frame_h: int
    frame_w: int

    def __post_init__(self):
        object.__setattr__(self, "mode", BoundaryMode(self.mode))
        if min(self.extent_h, self.extent_w) < 1:
            raise ConfigError("window extents must be >= 1")
        if self.extent_h > self.frame_h or self.extent_w > self.frame_w:
            raise ConfigError(
                f"window {self.extent_h}×{self.extent_w} exceeds frame {self.frame_h}×{self.frame_w}"
            )

    @classmethod
    def from_pixels(cls, mode, window_px: int, frame_h_px: int, frame_w_px: int, compression: int = 8, patch: int = 1):
        """Convert a pixel receptive field (e.g. 1152) into token extents."""
        f = compression * patch
        ext = max(1, window_px // f)
        fh, fw = frame_h_px // f, frame_w_px // f
        return cls(mode, min(ext, fh), min(ext, fw), fh, fw)


def _axis_allowed(mode: BoundaryMode, qc: np.ndarray, kc: np.ndarray, extent: int, size: int) -> np.ndarray:
    if mode is BoundaryMode.TRUNCATED:
        return 2 * np.abs(qc[:, None] - kc[None, :]) <= extent
    start = np.clip(qc - extent // 2, 0, size - extent)
    return (kc[None, :] >= start[:, None]) & (kc[None, :] < start[:, None] + extent)


def build_locality_mask(win: LocalityWindow, positions, key_positions=None) -> np.ndarray:
    qp = as_positions(positions)
    kp = qp if key_positions is None else as_positions(key_positions)
    for p in (qp, kp):
        if p.size and (p[:, 1].max() >= win.frame_h or p[:, 2].max() >= win.frame_w):
            raise ConfigError("positions fall outside the window's frame extents")
    rows = _axis_allowed(win.mode, qp[:, 1], kp[:, 1], win.extent_h, win.frame_h)
    rows &= _axis_allowed(win.mode, qp[:, 2], kp[:, 2], win.extent_w, win.frame_w)
    return rows


def compose_masks(ms) -> np.ndarray | None:
    """Elementwise conjunction; ``None`` entries are the all-allowed identity."""
    out = None
    for m in ms:
        if m is None:
            continue
        m = np.asarray(m, dtype=bool)
        if out is None:
            out = m.copy()
        else:
            if m.shape != out.shape:
                raise DimensionError(f"cannot compose masks of shape {out.shape} and {m.shape}")
            out &= m
    return out
