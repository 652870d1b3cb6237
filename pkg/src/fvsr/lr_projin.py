"""Causal LR projection-in: clip grouping, 2-D pixel shuffle, two strided causal
3-D convolutions with carried state, and an MLP into the model width.

Video tensors are channels-last: ``[frames × H × W × C]``.

Temporal alignment of :func:`causal_conv3d`: the input is prefixed with the
carried ``kernel_t - 1`` frames and output ``n`` sees the ``kernel_t`` frames
ending at input frame ``stride*n + stride - 1``, i.e. every output depends
only on its own stride group and the past. With a frame count divisible by
the stride, streaming clip by clip and one batch call are identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .tensor_core import F32


def silu(x):
    return x / (1.0 + np.exp(-x))


def pixel_shuffle_2d(frames, r: int = 8) -> np.ndarray:
    """Space-to-depth: ``[f×H×W×c] -> [f×H/r×W/r×r²c]``.

    Output channel ``(a*r + b)*c + ch`` holds input pixel ``(r*i + a, r*j + b)``
    of channel ``ch``, so each output position enumerates its r×r tile in
    raster order.
    """
    x = np.asarray(frames)
    if x.ndim != 4:
        raise DimensionError(f"expected [f×H×W×c], got {x.shape}")
    f, H, W, c = x.shape
    if H % r or W % r:
        raise DimensionError(f"extents {H}×{W} not divisible by {r}")
    y = x.reshape(f, H // r, r, W // r, r, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(y.reshape(f, H // r, W // r, r * r * c))


def pixel_unshuffle_2d(x, r: int = 8) -> np.ndarray:
    """Inverse of :func:`pixel_shuffle_2d` (depth-to-space)."""
    x = np.asarray(x)
    f, h, w, cc = x.shape
    if cc % (r * r):
        raise DimensionError(f"channel count {cc} not divisible by {r * r}")
    c = cc // (r * r)
    y = x.reshape(f, h, w, r, r, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(y.reshape(f, h * r, w * r, c))


def conv_carry_zeros(kernel_t: int, x_shape) -> np.ndarray:
    _, H, W, C = x_shape
    return np.zeros((kernel_t - 1, H, W, C), F32)


def causal_conv3d(x, weight, bias=None, carry=None, stride_t: int = 1):
    """Temporally causal, spatially 'same' 3-D convolution.

    ``weight`` is ``[kt×kh×kw×Cin×Cout]`` with odd ``kh``, ``kw``. ``carry``
    holds the last ``kt - 1`` input frames of the previous call (zeros at
    stream start). Returns ``(y, new_carry)`` with ``y`` of
    ``T // stride_t`` frames.
    """
    x = np.asarray(x, dtype=F32)
    weight = np.asarray(weight, dtype=F32)
    if x.ndim != 4 or weight.ndim != 5:
        raise DimensionError(f"bad conv operands {x.shape}, {weight.shape}")
    T, H, W, cin = x.shape
    kt, kh, kw, wcin, cout = weight.shape
    if wcin != cin:
        raise DimensionError(f"weight expects {wcin} input channels, got {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("spatial kernel extents must be odd")
    if T % stride_t:
        raise DimensionError(f"{T} frames not divisible by temporal stride {stride_t}")
    if carry is None:
        carry = np.zeros((kt - 1, H, W, cin), F32)
    carry = np.asarray(carry, dtype=F32)
    if carry.shape != (kt - 1, H, W, cin):
        raise DimensionError(f"carry shape {carry.shape} != {(kt - 1, H, W, cin)}")

    seq = np.concatenate([carry, x], axis=0)
    ph, pw = kh // 2, kw // 2
    padded = np.pad(seq, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    n_out = T // stride_t
    y = np.zeros((n_out * H * W, cout), F32)
    start = stride_t - 1
    for a in range(kt):
        frames = padded[start + a : start + a + stride_t * n_out : stride_t]
        for b in range(kh):
            for c in range(kw):
                patch = frames[:, b : b + H, c : c + W, :].reshape(-1, cin)
                y += patch @ weight[a, b, c]
    y = y.reshape(n_out, H, W, cout)
    if bias is not None:
        y += np.asarray(bias, dtype=F32)
    new_carry = seq[seq.shape[0] - (kt - 1) :].copy() if kt > 1 else seq[:0].copy()
    return y, new_carry


@dataclass(frozen=True)
class ProjInConfig:
    clip_len: int = 4
    spatial_factor: int = 8
    temporal_factors: tuple[int, ...] = (2, 2)
    kernel: tuple[int, int, int] = (3, 3, 3)
    in_channels: int = 3
    conv_channels: tuple[int, int] = (64, 64)
    mlp_hidden: int = 128
    model_dim: int = 128

    def __post_init__(self):
        if int(np.prod(self.temporal_factors)) != self.clip_len:
            raise ValueError("clip_len must equal the product of the temporal factors")
        if len(self.temporal_factors) != len(self.conv_channels):
            raise ValueError("one conv channel width per temporal factor")
        if self.kernel[1] % 2 == 0 or self.kernel[2] % 2 == 0:
            raise ValueError("spatial kernel extents must be odd")

    @property
    def shuffled_channels(self) -> int:
        return self.in_channels * self.spatial_factor**2


@dataclass
class ProjInWeights:
    conv_w: list
    conv_b: list
    mlp_w: list
    mlp_b: list

    @classmethod
    def init(cls, cfg: ProjInConfig, seed: int = 0, scale: float = 1.0) -> ProjInWeights:
        rng = np.random.default_rng(seed)
        kt, kh, kw = cfg.kernel
        conv_w, conv_b = [], []
        cin = cfg.shuffled_channels
        for cout in cfg.conv_channels:
            fan_in = kt * kh * kw * cin
            conv_w.append((rng.standard_normal((kt, kh, kw, cin, cout)) * scale / np.sqrt(fan_in)).astype(F32))
            conv_b.append((rng.standard_normal(cout) * 0.01 * scale).astype(F32))
            cin = cout
        dims = [cin, cfg.mlp_hidden, cfg.model_dim]
        mlp_w = [(rng.standard_normal((a, b)) * scale / np.sqrt(a)).astype(F32) for a, b in zip(dims, dims[1:])]
        mlp_b = [(rng.standard_normal(b) * 0.01 * scale).astype(F32) for b in dims[1:]]
        return cls(conv_w, conv_b, mlp_w, mlp_b)

    @classmethod
    def zeros(cls, cfg: ProjInConfig) -> ProjInWeights:
        w = cls.init(cfg)
        zero = lambda xs: [np.zeros_like(a) for a in xs]
        return cls(zero(w.conv_w), zero(w.conv_b), zero(w.mlp_w), zero(w.mlp_b))

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("conv_w", "conv_b", "mlp_w", "mlp_b"):
            for i, a in enumerate(getattr(self, name)):
                out[f"projin/{name}{i}"] = a
        return out


@dataclass
class ProjInCarry:
    """Trailing input slab of each causal conv; ``None`` means zeros (stream start)."""

    slabs: list = field(default_factory=lambda: [None, None])

    def copy(self) -> ProjInCarry:
        return ProjInCarry([None if s is None else s.copy() for s in self.slabs])


def _forward(frames, carry: ProjInCarry, weights: ProjInWeights, cfg: ProjInConfig):
    x = pixel_shuffle_2d(frames, cfg.spatial_factor)
    slabs = list(carry.slabs) + [None] * (len(cfg.temporal_factors) - len(carry.slabs))
    new = []
    for i, stride in enumerate(cfg.temporal_factors):
        x, c = causal_conv3d(x, weights.conv_w[i], weights.conv_b[i], slabs[i], stride)
        new.append(c)
        x = silu(x)
    for i, (w, b) in enumerate(zip(weights.mlp_w, weights.mlp_b)):
        x = x @ w + b
        if i < len(weights.mlp_w) - 1:
            x = silu(x)
    return x.astype(F32), ProjInCarry(new)


def project_clip(carry: ProjInCarry, clip, weights: ProjInWeights, cfg: ProjInConfig = ProjInConfig()):
    """Embed one clip of ``clip_len`` LR frames as ``[1×H/8×W/8×model_dim]``."""
    clip = np.asarray(clip, dtype=F32)
    if clip.ndim != 4 or clip.shape[0] != cfg.clip_len:
        raise DimensionError(f"expected a clip of {cfg.clip_len} frames, got {clip.shape}")
    return _forward(clip, carry, weights, cfg)


def project_frames(frames, weights: ProjInWeights, cfg: ProjInConfig = ProjInConfig(), carry: ProjInCarry | None = None):
    """Embed a whole frame sequence in one call (batch path); one latent frame per clip."""
    frames = np.asarray(frames, dtype=F32)
    if frames.shape[0] % cfg.clip_len:
        raise DimensionError(f"{frames.shape[0]} frames is not a whole number of clips")
    return _forward(frames, carry or ProjInCarry(), weights, cfg)
