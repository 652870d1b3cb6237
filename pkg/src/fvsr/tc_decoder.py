"""Tiny conditional decoder: latents (plus LR frames) to HR frames.

Layout, per stage, all convolutions causal in time:

    latents ─ conv_in ─ res ─ 1×1×1 expand ─ depth-to-time (×4 frames)
      └ 3 × [ nearest 2× upsample ─ concat(pooled LR) ─ conv ─ res ]
      └ conv_out → 3 channels

The LR frames are average-pooled down to each stage's resolution and
concatenated before that stage's conv. The unconditional variant drops the
LR inputs and widens its stage convolutions until the parameter count
matches the conditional model within 1%.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .fixtures import load_bundle, save_bundle
from .lr_projin import causal_conv3d, silu
from .tensor_core import F32

SPATIAL_STAGES = 3
TEMPORAL_FACTOR = 4


@dataclass(frozen=True)
class DecoderConfig:
    latent_channels: int = 16
    lr_channels: int = 3
    channels: tuple[int, int, int, int] = (64, 48, 32, 24)
    out_channels: int = 3
    kernel: tuple[int, int, int] = (3, 3, 3)
    conditional: bool = True

    def __post_init__(self):
        if len(self.channels) != SPATIAL_STAGES + 1:
            raise ConfigError(f"need {SPATIAL_STAGES + 1} channel widths, got {self.channels}")
        if min(self.channels) < 1:
            raise ConfigError("channel widths must be positive")

    @property
    def spatial_factor(self) -> int:
        return 2**SPATIAL_STAGES

    @property
    def temporal_factor(self) -> int:
        return TEMPORAL_FACTOR

    @property
    def variant(self) -> str:
        return "conditional" if self.conditional else "unconditional"


def _conv_shape(kernel, cin, cout):
    return tuple(kernel) + (cin, cout)


def weight_shapes(cfg: DecoderConfig) -> dict[str, tuple]:
    """Name → shape of every trainable tensor."""
    k = cfg.kernel
    c = cfg.channels
    lr = cfg.lr_channels if cfg.conditional else 0
    shapes = {
        "conv_in.w": _conv_shape(k, cfg.latent_channels, c[0]), "conv_in.b": (c[0],),
        "res0.w1": _conv_shape(k, c[0], c[0]), "res0.b1": (c[0],),
        "res0.w2": _conv_shape(k, c[0], c[0]), "res0.b2": (c[0],),
        "expand.w": (1, 1, 1, c[0], TEMPORAL_FACTOR * c[0]), "expand.b": (TEMPORAL_FACTOR * c[0],),
    }
    for s in range(SPATIAL_STAGES):
        cin, cout = c[s], c[s + 1]
        shapes[f"up{s}.w"] = _conv_shape(k, cin + lr, cout)
        shapes[f"up{s}.b"] = (cout,)
        shapes[f"res{s + 1}.w1"] = _conv_shape(k, cout, cout)
        shapes[f"res{s + 1}.b1"] = (cout,)
        shapes[f"res{s + 1}.w2"] = _conv_shape(k, cout, cout)
        shapes[f"res{s + 1}.b2"] = (cout,)
    shapes["conv_out.w"] = _conv_shape((1, k[1], k[2]), c[-1], cfg.out_channels)
    shapes["conv_out.b"] = (cfg.out_channels,)
    return shapes


def param_count(cfg: DecoderConfig) -> int:
    return sum(int(np.prod(s)) for s in weight_shapes(cfg).values())


def balanced_unconditional(cfg: DecoderConfig, max_extra: int = 8) -> DecoderConfig:
    """Unconditional twin of ``cfg`` with widened stages matching its parameter count."""
    target = param_count(replace(cfg, conditional=True))
    best, best_gap = None, None
    for extra in itertools.product(range(max_extra + 1), repeat=SPATIAL_STAGES):
        chans = (cfg.channels[0],) + tuple(c + e for c, e in zip(cfg.channels[1:], extra))
        cand = replace(cfg, channels=chans, conditional=False)
        gap = abs(param_count(cand) - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = cand, gap
    return best


def wan_scale_config() -> DecoderConfig:
    """Channel widths on the order of a full video VAE decoder, for size comparisons."""
    return DecoderConfig(channels=(384, 384, 192, 96))


@dataclass
class DecoderWeights:
    cfg: DecoderConfig
    tensors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: DecoderConfig, seed: int = 0) -> DecoderWeights:
        rng = np.random.default_rng(seed)
        out = {}
        for name, shape in weight_shapes(cfg).items():
            if name.endswith(("b", "b1", "b2")) and len(shape) == 1:
                out[name] = (rng.standard_normal(shape) * 0.01).astype(F32)
            else:
                fan_in = int(np.prod(shape[:-1]))
                out[name] = (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(F32)
        return cls(cfg, out)

    @classmethod
    def zeros(cls, cfg: DecoderConfig) -> DecoderWeights:
        return cls(cfg, {n: np.zeros(s, F32) for n, s in weight_shapes(cfg).items()})

    def save(self, directory):
        meta = {"variant": self.cfg.variant, "channels": list(self.cfg.channels),
                "latent_channels": self.cfg.latent_channels, "lr_channels": self.cfg.lr_channels}
        return save_bundle(directory, self.tensors, meta)

    @classmethod
    def load(cls, directory, cfg: DecoderConfig) -> DecoderWeights:
        tensors = load_bundle(directory)
        want = weight_shapes(cfg)
        if set(tensors) != set(want) or any(tensors[n].shape != tuple(s) for n, s in want.items()):
            raise DimensionError("weight bundle does not match decoder config")
        return cls(cfg, tensors)


@dataclass
class DecoderState:
    """Carried conv inputs for streaming decode, keyed by conv name."""

    carry: dict = field(default_factory=dict)


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _pool(x, s):
    if s == 1:
        return x
    T, H, W, C = x.shape
    return x.reshape(T, H // s, s, W // s, s, C).mean(axis=(2, 4))


class _Runner:
    def __init__(self, w: DecoderWeights, state: DecoderState | None):
        self.w = w.tensors
        self.state = state

    def conv(self, name, x):
        carry = None if self.state is None else self.state.carry.get(name)
        y, new = causal_conv3d(x, self.w[name + ".w"], self.w[name + ".b"], carry)
        if self.state is not None:
            self.state.carry[name] = new
        return y

    def res(self, name, x):
        h, wt = self.w, self.w[name + ".w1"]
        carry1 = None if self.state is None else self.state.carry.get(name + "/1")
        y, c1 = causal_conv3d(silu(x), wt, h[name + ".b1"], carry1)
        carry2 = None if self.state is None else self.state.carry.get(name + "/2")
        y, c2 = causal_conv3d(silu(y), h[name + ".w2"], h[name + ".b2"], carry2)
        if self.state is not None:
            self.state.carry[name + "/1"], self.state.carry[name + "/2"] = c1, c2
        return x + y


def decode(latents, lr_frames, cfg: DecoderConfig, weights: DecoderWeights, state: DecoderState | None = None):
    """Reconstruct ``[4T × 8H × 8W × 3]`` frames from latents ``[T × H × W × C]``.

    ``lr_frames`` must be ``[4T × 8H × 8W × lr_channels]``; the unconditional
    variant checks the shape but never reads the values. Pass a
    :class:`DecoderState` to decode a stream chunk by chunk.
    """
    z = np.asarray(latents, dtype=F32)
    if z.ndim != 4 or z.shape[-1] != cfg.latent_channels:
        raise DimensionError(f"latents {z.shape} do not carry {cfg.latent_channels} channels")
    T, H, W, _ = z.shape
    sf, tf = cfg.spatial_factor, cfg.temporal_factor
    want = (T * tf, H * sf, W * sf, cfg.lr_channels)
    lr = np.asarray(lr_frames, dtype=F32)
    if lr.shape != want:
        raise DimensionError(f"LR frames {lr.shape} not aligned with latents (expected {want})")

    run = _Runner(weights, state)
    c0 = cfg.channels[0]
    x = run.conv("conv_in", z)
    x = run.res("res0", x)
    x = run.conv("expand", silu(x))
    x = x.reshape(T, H, W, tf, c0).transpose(0, 3, 1, 2, 4).reshape(T * tf, H, W, c0)
    for s in range(SPATIAL_STAGES):
        x = _upsample2(x)
        if cfg.conditional:
            x = np.concatenate([x, _pool(lr, sf // 2 ** (s + 1))], axis=-1)
        x = run.conv(f"up{s}", x)
        x = run.res(f"res{s + 1}", x)
    return run.conv("conv_out", silu(x))
