"""Streaming one-step engine over a toy sparse-causal transformer with a windowed KV cache.

Each :func:`step` consumes one temporal block of input (``frames_per_step``
latent frames, i.e. ``frames_per_step * clip_len`` LR frames plus matching
noise) and emits the latents for those frames in a single forward pass.
Queries come from the current block; keys and values from the retained
cache plus the current block. RoPE is applied at absolute positions before
caching, so eviction never changes relative offsets.

:func:`run_batch` is the non-streaming reference: the whole sequence in one
pass, with dense masked attention restricted to the same block plan.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import CacheInvariantError, ConfigError, DimensionError
from .grid import TokenGrid
from .lr_projin import ProjInCarry, ProjInConfig, ProjInWeights, project_frames, silu
from .masks import BoundaryMode, LocalityWindow, build_locality_mask, compose_masks
from .rope3d import RopeConfig, apply_rope
from .sparse_attn import (
    SparsePlan,
    partition_positions,
    plan_sparse,
    sparse_attention_exec,
    sparsity_report,
)
from .tensor_core import F32, dense_attention_oracle


class EvictionStrategy(str, Enum):
    SLIDING_WINDOW = "sliding_window"
    UNIFORM = "uniform"
    HEAD_WISE = "head_wise"

    @classmethod
    def parse(cls, value) -> EvictionStrategy:
        aliases = {"sliding": cls.SLIDING_WINDOW, "headwise": cls.HEAD_WISE}
        if isinstance(value, str) and value in aliases:
            return aliases[value]
        return cls(value)


@dataclass(frozen=True)
class ToyDiTConfig:
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 32
    ffn_dim: int = 256
    latent_channels: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 2:
            raise ConfigError("the toy model needs at least two layers")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary encoding")

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim


@dataclass
class ToyDiT:
    """Synthetic-weight stand-in for the one-step generator."""

    cfg: ToyDiTConfig
    embed: np.ndarray
    cond: np.ndarray
    layers: list
    head: np.ndarray

    @classmethod
    def init(cls, cfg: ToyDiTConfig = ToyDiTConfig()) -> ToyDiT:
        rng = np.random.default_rng(cfg.seed)
        C, F, Cl = cfg.model_dim, cfg.ffn_dim, cfg.latent_channels

        def w(a, b):
            return (rng.standard_normal((a, b)) / np.sqrt(a)).astype(F32)

        embed = w(Cl, C)
        # constant conditioning vector in place of text cross-attention
        cond = (rng.standard_normal(C) * 0.1).astype(F32)
        layers = [
            {"wq": w(C, C), "wk": w(C, C), "wv": w(C, C), "wo": w(C, C), "w1": w(C, F), "w2": w(F, C)}
            for _ in range(cfg.n_layers)
        ]
        return cls(cfg, embed, cond, layers, w(C, Cl))

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"dit/embed": self.embed, "dit/cond": self.cond, "dit/head": self.head}
        for i, layer in enumerate(self.layers):
            out.update({f"dit/layer{i}/{k}": v for k, v in layer.items()})
        return out


def rms_norm(x, eps: float = 1e-6):
    x = np.asarray(x, dtype=F32)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + F32(eps))


@dataclass(frozen=True)
class StreamConfig:
    """Shape and sparsity knobs for one live stream.

    ``height`` / ``width`` are latent extents; LR frames are eight times
    larger. ``window`` counts retained latent frames per (layer, head).
    """

    height: int = 16
    width: int = 16
    frames_per_step: int = 2
    block_hw: tuple[int, int] = (8, 8)
    topk: int = 4
    window: int = 8
    strategy: EvictionStrategy = EvictionStrategy.SLIDING_WINDOW
    locality: BoundaryMode | None = None
    locality_extent: tuple[int, int] | None = None
    model: ToyDiTConfig = ToyDiTConfig()
    projin: ProjInConfig = ProjInConfig()
    rope_base: float = 10000.0

    def __post_init__(self):
        object.__setattr__(self, "strategy", EvictionStrategy.parse(self.strategy))
        if self.locality is not None:
            object.__setattr__(self, "locality", BoundaryMode(self.locality))
        if self.projin.model_dim != self.model.model_dim:
            raise ConfigError("proj-in output width must equal the model width")
        if self.frames_per_step < 1 or self.topk < 1:
            raise ConfigError("frames_per_step and topk must be >= 1")
        if self.window < self.frames_per_step:
            raise ConfigError("window must hold at least one step of frames")
        self.locality_window()  # validates extents

    @property
    def block_shape(self) -> tuple[int, int, int]:
        return (self.frames_per_step, *self.block_hw)

    @property
    def lr_frames_per_step(self) -> int:
        return self.frames_per_step * self.projin.clip_len

    def rope(self) -> RopeConfig:
        return RopeConfig(self.model.head_dim, base=self.rope_base)

    def locality_window(self) -> LocalityWindow | None:
        if self.locality is None:
            return None
        eh, ew = self.locality_extent or (self.height, self.width)
        return LocalityWindow(self.locality, eh, ew, self.height, self.width)


# ---------------------------------------------------------------------------
# KV cache


@dataclass
class CoarseMap:
    """Importance evidence for one layer: per head, coarse attention mass and the
    share of each key block's tokens that belongs to each cached frame."""

    mass: list  # per head [nq × nk]
    share: list  # per head [nk × F]
    frames: list  # per head [F] frame ids

    def frame_scores(self, head: int) -> dict[int, float]:
        received = self.mass[head].astype(np.float64).sum(axis=0) @ self.share[head]
        return dict(zip(np.asarray(self.frames[head]).tolist(), received.tolist()))

    @classmethod
    def from_frame_scores(cls, scores, frames) -> CoarseMap:
        """Build a synthetic map whose per-head frame mass equals ``scores [heads × F]``."""
        scores = np.asarray(scores, dtype=F32)
        eye = np.eye(len(frames))
        return cls([s[None, :] for s in scores], [eye] * len(scores), [np.asarray(frames)] * len(scores))

    @classmethod
    def from_plans(cls, plans: list[SparsePlan], key_frames: list[np.ndarray]) -> CoarseMap:
        mass, share, frames = [], [], []
        for plan, kf in zip(plans, key_frames):
            fr = np.unique(kf)
            sh = np.zeros((plan.k_part.block_num, len(fr)))
            np.add.at(sh, (plan.k_part.assignment, np.searchsorted(fr, kf)), 1.0)
            sh /= sh.sum(axis=1, keepdims=True)
            mass.append(plan.coarse_attention())
            share.append(sh)
            frames.append(fr)
        return cls(mass, share, frames)


class KVCache:
    """One layer's cache: K/V rows grouped by latent frame, with a retained set per head."""

    def __init__(self, n_heads: int, window: int, strategy=EvictionStrategy.SLIDING_WINDOW):
        self.n_heads = n_heads
        self.window = window
        self.strategy = EvictionStrategy.parse(strategy)
        self.store: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self.retained: list[set[int]] = [set() for _ in range(n_heads)]
        self.newest: set[int] = set()
        self.corrupt_hook = False  # test hook: makes eviction break its own contract

    def append(self, k, v, positions) -> None:
        """Add rows ``k, v [heads × n × d]`` with absolute ``positions [n × 3]``."""
        frames = positions[:, 0]
        self.newest = set(np.unique(frames).tolist())
        for f in sorted(self.newest):
            sel = frames == f
            self.store[f] = (k[:, sel], v[:, sel], positions[sel])
            for r in self.retained:
                r.add(f)

    def frames(self, head: int = 0) -> list[int]:
        return sorted(self.retained[head])

    def gather(self, head: int):
        fr = self.frames(head)
        if not fr:
            return None
        k = np.concatenate([self.store[f][0][head] for f in fr])
        v = np.concatenate([self.store[f][1][head] for f in fr])
        pos = np.concatenate([self.store[f][2] for f in fr])
        return k, v, pos

    def _gc(self) -> None:
        live = set().union(*self.retained)
        for f in list(self.store):
            if f not in live:
                del self.store[f]

    def check(self) -> None:
        """Raise :class:`CacheInvariantError` if the retained sets break the strategy."""
        seen = set(self.store)
        for h, r in enumerate(self.retained):
            if len(r) > self.window:
                raise CacheInvariantError(f"head {h} retains {len(r)} frames > window {self.window}")
            if not r <= seen:
                raise CacheInvariantError(f"head {h} retains frames with no stored rows")
        if self.strategy is EvictionStrategy.SLIDING_WINDOW:
            expect = set(sorted(seen)[-self.window :])
            for h, r in enumerate(self.retained):
                if r != expect:
                    raise CacheInvariantError(f"sliding window: head {h} retains {sorted(r)}, expected {sorted(expect)}")
        if self.strategy is EvictionStrategy.UNIFORM:
            for h, r in enumerate(self.retained[1:], 1):
                if r != self.retained[0]:
                    raise CacheInvariantError(f"uniform eviction: head {h} diverges from head 0")


def _drop_lowest(frames: set[int], scores: dict[int, float], protected: set[int], keep: int) -> set[int]:
    cands = sorted(frames - protected, key=lambda f: (scores.get(f, 0.0), f))
    out = set(frames)
    for f in cands:
        if len(out) <= keep:
            break
        out.discard(f)
    return out


def evict(cache: KVCache, importance: CoarseMap | None = None) -> KVCache:
    """Bound every head's retained set to ``cache.window`` frames, in place.

    ``sliding_window`` keeps the most recent frames. ``uniform`` scores each
    frame by coarse attention mass summed over heads and drops the lowest,
    identically for all heads. ``head_wise`` does the same per head. Frames
    appended by the latest step are never dropped.
    """
    strategy = cache.strategy
    if all(len(r) <= cache.window for r in cache.retained):
        cache.check()
        return cache
    if strategy is EvictionStrategy.SLIDING_WINDOW:
        for h, r in enumerate(cache.retained):
            cache.retained[h] = set(sorted(r)[-cache.window :])
    else:
        if importance is None:
            raise ConfigError(f"{strategy.value} eviction needs a coarse importance map")
        if strategy is EvictionStrategy.UNIFORM:
            total: dict[int, float] = {}
            for h in range(cache.n_heads):
                for f, s in importance.frame_scores(h).items():
                    total[f] = total.get(f, 0.0) + s
            keep = _drop_lowest(cache.retained[0], total, cache.newest, cache.window)
            cache.retained = [set(keep) for _ in range(cache.n_heads)]
            if cache.corrupt_hook and len(keep) > 1:
                cache.retained[0].discard(min(keep - cache.newest or keep))
        else:
            cache.retained = [
                _drop_lowest(r, importance.frame_scores(h), cache.newest, cache.window)
                for h, r in enumerate(cache.retained)
            ]
    cache._gc()
    cache.check()
    return cache


# ---------------------------------------------------------------------------
# streaming step


@dataclass
class StepTrace:
    t: int
    retained: list  # per layer, union over heads of retained frame ids
    density: float
    wall_ms: float


@dataclass
class StreamState:
    cfg: StreamConfig
    model: ToyDiT
    projin: ProjInWeights
    t: int = 0
    caches: list = field(default_factory=list)
    carry: ProjInCarry = field(default_factory=ProjInCarry)
    coarse: list | None = None  # per layer CoarseMap from the latest step
    trace: list = field(default_factory=list)

    @classmethod
    def start(cls, cfg: StreamConfig, model: ToyDiT | None = None, projin: ProjInWeights | None = None,
              seed: int | None = None) -> StreamState:
        seed = cfg.model.seed if seed is None else seed
        model = model or ToyDiT.init(cfg.model)
        projin = projin or ProjInWeights.init(cfg.projin, seed=seed + 1)
        caches = [KVCache(cfg.model.n_heads, cfg.window, cfg.strategy) for _ in range(cfg.model.n_layers)]
        return cls(cfg, model, projin, caches=caches)


def _check_inputs(cfg: StreamConfig, lr_frames, noise, n_latent: int):
    p = cfg.projin
    want_lr = (n_latent * p.clip_len, cfg.height * p.spatial_factor, cfg.width * p.spatial_factor, p.in_channels)
    want_noise = (n_latent, cfg.height, cfg.width, cfg.model.latent_channels)
    lr = np.asarray(lr_frames, dtype=F32)
    nz = np.asarray(noise, dtype=F32)
    if lr.shape != want_lr:
        raise DimensionError(f"LR frames {lr.shape}, expected {want_lr}")
    if nz.shape != want_noise:
        raise DimensionError(f"noise {nz.shape}, expected {want_noise}")
    return lr, nz


def _embed(model: ToyDiT, emb, noise):
    x = noise @ model.embed + emb + model.cond
    return x.reshape(-1, model.cfg.model_dim).astype(F32)


def _heads(x, n_heads):
    L, C = x.shape
    return x.reshape(L, n_heads, C // n_heads).transpose(1, 0, 2)


def _causal(q_frames, k_frames, window=None, frames_per_step=1):
    m = k_frames[None, :] <= q_frames[:, None]
    if window is not None:
        start = (q_frames // frames_per_step) * frames_per_step
        m &= k_frames[None, :] >= (start - window)[:, None]
    return m


def _token_mask(cfg: StreamConfig, qpos, kpos, window=None):
    """Frame-causal (optionally banded) conjunction with the spatial locality window."""
    causal = _causal(qpos[:, 0], kpos[:, 0], window, cfg.frames_per_step)
    loc = cfg.locality_window()
    local = None if loc is None else build_locality_mask(loc, qpos, kpos)
    m = compose_masks([causal, local])
    return None if m.all() else m


def _ffn(layer, x):
    return silu(rms_norm(x) @ layer["w1"]) @ layer["w2"]


def step(state: StreamState, lr_frames, noise) -> np.ndarray:
    """Advance the stream by one temporal block and return its latents.

    ``lr_frames`` is ``[frames_per_step*clip_len × 8H × 8W × 3]``, ``noise``
    is ``[frames_per_step × H × W × latent_channels]``; the result has the
    shape of ``noise``.
    """
    t0 = time.perf_counter()
    cfg, model = state.cfg, state.model
    fps = cfg.frames_per_step
    lr, nz = _check_inputs(cfg, lr_frames, noise, fps)
    emb, state.carry = project_frames(lr, state.projin, cfg.projin, state.carry)
    x = _embed(model, emb, nz)
    grid = TokenGrid(fps, cfg.height, cfg.width, t0=state.t)
    qpos = grid.positions()
    rope = cfg.rope()
    H = cfg.model.n_heads
    coarse, densities = [], []
    for li, layer in enumerate(model.layers):
        cache = state.caches[li]
        n = rms_norm(x)
        q = apply_rope(_heads(n @ layer["wq"], H), qpos, rope)
        k = apply_rope(_heads(n @ layer["wk"], H), qpos, rope)
        v = _heads(n @ layer["wv"], H)
        q_part = partition_positions(qpos, cfg.block_shape)
        outs, plans, key_frames = [], [], []
        for h in range(H):
            past = cache.gather(h)
            if past is None:
                kh, vh, kpos = k[h], v[h], qpos
            else:
                kh = np.concatenate([past[0], k[h]])
                vh = np.concatenate([past[1], v[h]])
                kpos = np.concatenate([past[2], qpos])
            k_part = partition_positions(kpos, cfg.block_shape)
            mask = _token_mask(cfg, qpos, kpos)
            plan = plan_sparse(q[h], kh, q_part, mask, cfg.topk, key_part=k_part)
            outs.append(sparse_attention_exec(q[h], kh, vh, plan, mask))
            plans.append(plan)
            key_frames.append(kpos[:, 0])
            densities.append(sparsity_report(plan).density)
        attn = np.concatenate(outs, axis=1)
        x = x + attn @ layer["wo"]
        x = x + _ffn(layer, x)
        cache.append(k, v, qpos)
        coarse.append(CoarseMap.from_plans(plans, key_frames))
    for cache, cmap in zip(state.caches, coarse):
        evict(cache, cmap)
    state.coarse = coarse
    z = (rms_norm(x) @ model.head).reshape(nz.shape).astype(F32)
    state.t += fps
    wall = (time.perf_counter() - t0) * 1e3
    retained = [sorted(set().union(*c.retained)) for c in state.caches]
    state.trace.append(StepTrace(grid.t0, retained, float(np.mean(densities)), wall))
    return z


def run_stream(state: StreamState, lr_frames, noise) -> np.ndarray:
    """Step through a whole sequence; returns latents ``[T × H × W × Cl]``."""
    cfg = state.cfg
    fps = cfg.frames_per_step
    T = np.shape(noise)[0]
    if T % fps:
        raise DimensionError(f"{T} latent frames is not a whole number of steps")
    per = cfg.lr_frames_per_step
    outs = [step(state, lr_frames[i * per : (i + 1) * per], noise[i * fps : (i + 1) * fps]) for i in range(T // fps)]
    return np.concatenate(outs)


def run_batch(cfg: StreamConfig, model: ToyDiT, projin: ProjInWeights, lr_frames, noise,
              window: int | None = None) -> np.ndarray:
    """Whole-sequence causal reference.

    Attention is the dense oracle under ``causal ∧ locality ∧ selected-block``
    masks, with the block plan computed over the full sequence. ``window``
    bands the causal mask so a block starting at frame ``s`` sees frames
    ``>= s - window``, which is what a sliding-window cache retains; it is
    exact when ``window`` is a multiple of ``frames_per_step``.
    """
    T = np.shape(noise)[0]
    lr, nz = _check_inputs(cfg, lr_frames, noise, T)
    emb, _ = project_frames(lr, projin, cfg.projin)
    x = _embed(model, emb, nz)
    pos = TokenGrid(T, cfg.height, cfg.width).positions()
    part = partition_positions(pos, cfg.block_shape)
    mask = _token_mask(cfg, pos, pos, window)
    rope = cfg.rope()
    H = cfg.model.n_heads
    for layer in model.layers:
        n = rms_norm(x)
        q = apply_rope(_heads(n @ layer["wq"], H), pos, rope)
        k = apply_rope(_heads(n @ layer["wk"], H), pos, rope)
        v = _heads(n @ layer["wv"], H)
        outs = []
        for h in range(H):
            plan = plan_sparse(q[h], k[h], part, mask, cfg.topk)
            outs.append(dense_attention_oracle(q[h], k[h], v[h], compose_masks([mask, plan.token_pair_mask()])))
        x = x + np.concatenate(outs, axis=1) @ layer["wo"]
        x = x + _ffn(layer, x)
    return (rms_norm(x) @ model.head).reshape(nz.shape).astype(F32)


# ---------------------------------------------------------------------------
# latency and traces


@dataclass(frozen=True)
class ChunkConfig:
    """Chunk-wise (non-streaming) pipeline: nothing is emitted until a chunk is full."""

    chunk_len: int = 32


def lookahead_latency(cfg) -> int:
    """Input LR frames that must arrive before the first output frame can be emitted.

    A streaming step needs its whole temporal block: ``frames_per_step``
    latent frames, each compressed from ``clip_len`` LR frames by the
    causal proj-in. A chunked pipeline needs the whole chunk.
    """
    if isinstance(cfg, ChunkConfig):
        return cfg.chunk_len
    return cfg.frames_per_step * cfg.projin.clip_len


TRACE_COLUMNS = ("t", "retained_frames", "density", "step_wall_time_ms")


def trace_csv(trace) -> str:
    """Per-step CSV; ``retained_frames`` lists each layer's frames, layers separated by ``|``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in trace:
        w.writerow([row.t, "|".join(" ".join(map(str, r)) for r in row.retained),
                    f"{row.density:.6f}", f"{row.wall_ms:.3f}"])
    return buf.getvalue()

