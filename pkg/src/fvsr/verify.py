"""Oracle suite behind ``fvsr verify``.

Each check builds small seeded fixtures, compares the production path with
an independent reference and returns a :class:`CheckResult`. Exceptions
inside a check count as failures of that check.
"""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import quad

from .config import BenchConfig
from .errors import CacheInvariantError, ConfigError
from .fixtures import decode_tensor, encode_tensor
from .grid import TokenGrid
from .kv_stream import (
    ChunkConfig,
    CoarseMap,
    KVCache,
    StreamConfig,
    StreamState,
    evict,
    lookahead_latency,
    run_batch,
    run_stream,
)
from .losses import (
    FlowSchedule,
    GradientMagnitudeLoss,
    decoder_distill_loss,
    dmd_gradient,
    flow_matching_loss,
    gaussian_kl_grad,
    gaussian_scores,
    reconstruction_loss,
)
from .lr_projin import (
    ProjInCarry,
    ProjInConfig,
    ProjInWeights,
    project_clip,
    project_frames,
)
from .masks import (
    BoundaryMode,
    CausalSpec,
    LocalityWindow,
    build_causal_mask,
    build_locality_mask,
    compose_masks,
)
from .rope3d import RopeConfig, apply_rope
from .sparse_attn import partition_positions, plan_sparse, sparse_attention_exec
from .tc_decoder import (
    DecoderConfig,
    DecoderState,
    DecoderWeights,
    balanced_unconditional,
    decode,
    param_count,
)
from .tensor_core import F32, dense_attention_oracle, masked_softmax_rows


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, in float64."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def relative_error(got, want) -> float:
    got, want = np.asarray(got, np.float64), np.asarray(want, np.float64)
    return float(np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-12))


def _qkv(rng, heads, L, d):
    return [rng.standard_normal((heads, L, d)).astype(F32) for _ in range(3)]


# ---------------------------------------------------------------------------
# checks


def check_softmax(cfg: BenchConfig):
    rng = np.random.default_rng(cfg.seeds[0])
    s = rng.standard_normal((64, 96)).astype(F32) * 4
    m = rng.random((64, 96)) < 0.6
    m[:, 0] = True
    got = masked_softmax_rows(s, m)
    e = np.where(m, np.exp(s.astype(np.float64) - s.max()), 0.0)
    return float(np.max(np.abs(got - e / e.sum(1, keepdims=True)))), 1e-6


def check_sparse_vs_dense(cfg: BenchConfig):
    """``cfg.topk`` plan against the dense oracle restricted to the selected pairs."""
    err = 0.0
    grid = TokenGrid(cfg.frames, cfg.height, cfg.width)
    part = partition_positions(grid.positions(), (min(2, cfg.frames), 8, 8))
    for seed in cfg.seeds:
        q, k, v = _qkv(np.random.default_rng(seed), cfg.heads, len(grid), cfg.head_dim)
        for h in range(cfg.heads):
            plan = plan_sparse(q[h], k[h], part, None, cfg.topk)
            got = sparse_attention_exec(q[h], k[h], v[h], plan)
            ref_mask = None if cfg.topk >= part.block_num else plan.token_pair_mask()
            err = max(err, float(np.max(np.abs(got - dense_attention_oracle(q[h], k[h], v[h], ref_mask)))))
    return err, 1e-5


def check_sparse_masked(cfg: BenchConfig):
    """Causal and locality masks through planning and execution."""
    grid = TokenGrid(4, 12, 20)
    pos = grid.positions()
    part = partition_positions(pos, (2, 8, 8))
    causal = build_causal_mask(CausalSpec(tuple(pos[:, 0].tolist())))
    err = 0.0
    for mode in BoundaryMode:
        loc = build_locality_mask(LocalityWindow(mode, 5, 7, 12, 20), pos)
        mask = compose_masks([causal, loc])
        q, k, v = _qkv(np.random.default_rng(cfg.seeds[0]), 1, len(grid), cfg.head_dim)
        plan = plan_sparse(q[0], k[0], part, mask, 2)
        got = sparse_attention_exec(q[0], k[0], v[0], plan, mask)
        ref = dense_attention_oracle(q[0], k[0], v[0], compose_masks([mask, plan.token_pair_mask()]))
        err = max(err, float(np.max(np.abs(got - ref))))
    return err, 1e-5


def _small_stream(cfg: BenchConfig, **over) -> StreamConfig:
    base = replace(cfg, height=16, width=16, layers=2, frames_per_step=2)
    return base.stream_config(**over)


def _stream_inputs(scfg: StreamConfig, T: int, seed: int):
    rng = np.random.default_rng(seed)
    p = scfg.projin
    lr = rng.standard_normal((T * p.clip_len, scfg.height * 8, scfg.width * 8, 3)).astype(F32)
    nz = rng.standard_normal((T, scfg.height, scfg.width, scfg.model.latent_channels)).astype(F32)
    return lr, nz


def check_stream_vs_batch(cfg: BenchConfig):
    T = 4
    scfg = _small_stream(cfg, window=max(T, 2), evict="sliding")
    lr, nz = _stream_inputs(scfg, T, cfg.seeds[0])
    st = StreamState.start(scfg)
    got = run_stream(st, lr, nz)
    ref = run_batch(scfg, st.model, st.projin, lr, nz)
    return float(np.max(np.abs(got - ref))), 1e-5


def check_window_band(cfg: BenchConfig):
    """A sliding window of W frames equals the batch run with a W-banded causal mask."""
    T = 6
    scfg = _small_stream(cfg, window=2, evict="sliding")
    lr, nz = _stream_inputs(scfg, T, cfg.seeds[0])
    st = StreamState.start(scfg)
    got = run_stream(st, lr, nz)
    ref = run_batch(scfg, st.model, st.projin, lr, nz, window=2)
    return float(np.max(np.abs(got - ref))), 1e-5


def check_stream_causality(cfg: BenchConfig):
    T = 4
    scfg = _small_stream(cfg, window=4, evict="sliding")
    lr, nz = _stream_inputs(scfg, T, cfg.seeds[0])
    st = StreamState.start(scfg)
    base = run_stream(st, lr, nz)
    lr2, nz2 = lr.copy(), nz.copy()
    lr2[scfg.lr_frames_per_step :] += 1.0
    nz2[scfg.frames_per_step :] -= 1.0
    st2 = StreamState.start(scfg, st.model, st.projin)
    pert = run_stream(st2, lr2, nz2)
    fps = scfg.frames_per_step
    changed = float(np.max(np.abs(base[:fps] - pert[:fps])))
    moved = float(np.max(np.abs(base[fps:] - pert[fps:])))
    return changed if moved > 0 else float("inf"), 0.0


def check_projin(cfg: BenchConfig):
    """Clip-by-clip and whole-sequence embedding agree; later clips never affect earlier ones."""
    pcfg = ProjInConfig()
    w = ProjInWeights.init(pcfg, seed=cfg.seeds[0])
    rng = np.random.default_rng(cfg.seeds[0])
    frames = rng.standard_normal((5 * pcfg.clip_len, 16, 16, 3)).astype(F32)
    batch, _ = project_frames(frames, w, pcfg)
    carry, outs = ProjInCarry(), []
    for i in range(5):
        e, carry = project_clip(carry, frames[i * 4 : (i + 1) * 4], w, pcfg)
        outs.append(e)
    err = float(np.max(np.abs(np.concatenate(outs) - batch)))
    pert = frames.copy()
    pert[9] += 1.0  # third clip
    after, _ = project_frames(pert, w, pcfg)
    if np.any(after[:2] != batch[:2]):
        return float("inf"), 0.0
    return err, 1e-5


def check_decoder(cfg: BenchConfig):
    """Shape law, streaming equality and causality of the tiny decoder."""
    dcfg = DecoderConfig(channels=(16, 12, 8, 8))
    w = DecoderWeights.init(dcfg, cfg.seeds[0])
    rng = np.random.default_rng(cfg.seeds[0])
    z = rng.standard_normal((3, 2, 3, 16)).astype(F32)
    lr = rng.standard_normal((12, 16, 24, 3)).astype(F32)
    out = decode(z, lr, dcfg, w)
    if out.shape != (12, 16, 24, 3):
        return float("inf"), 0.0
    st = DecoderState()
    parts = [decode(z[i : i + 1], lr[4 * i : 4 * i + 4], dcfg, w, st) for i in range(3)]
    err = float(np.max(np.abs(np.concatenate(parts) - out)))
    z2, lr2 = z.copy(), lr.copy()
    z2[2] += 1.0
    lr2[8:] += 1.0
    pert = decode(z2, lr2, dcfg, w)
    leak = float(np.max(np.abs(pert[:8] - out[:8])))
    return max(err, leak), 0.0


def check_decoder_parity(cfg: BenchConfig):
    cond = DecoderConfig()
    unc = balanced_unconditional(cond)
    return abs(param_count(unc) - param_count(cond)) / param_count(cond), 0.01


def check_locality_range(cfg: BenchConfig):
    """Every allowed pair on a 2×24×24 grid keeps its offsets inside the window span."""
    pos = TokenGrid(2, 24, 24).positions()
    bad = 0
    for mode in BoundaryMode:
        for e in (1, 4, 5, 9, 24):
            win = LocalityWindow(mode, e, e, 24, 24)
            m = build_locality_mask(win, pos)
            qi, ki = np.nonzero(m)
            dh = np.abs(pos[qi, 1] - pos[ki, 1])
            dw = np.abs(pos[qi, 2] - pos[ki, 2])
            limit = e - 1 if mode is BoundaryMode.PRESERVED else e // 2
            bad += int(np.count_nonzero((dh > limit) | (dw > limit)))
    return float(bad), 0.0


def check_rope_shift(cfg: BenchConfig):
    rcfg = RopeConfig(cfg.head_dim)
    rng = np.random.default_rng(cfg.seeds[0])
    worst = 0.0
    for axis in range(3):
        for _ in range(50):
            q, k = rng.standard_normal((2, cfg.head_dim))
            pq, pk = rng.integers(32, 96, (2, 3))
            delta = np.zeros(3, int)
            delta[axis] = rng.integers(-32, 33)
            a = apply_rope(q[None], pq[None], rcfg) @ apply_rope(k[None], pk[None], rcfg).T
            b = apply_rope(q[None], (pq + delta)[None], rcfg) @ apply_rope(k[None], (pk + delta)[None], rcfg).T
            worst = max(worst, float(abs(a - b).max()))
    return worst, 1e-4


def check_grad_losses(cfg: BenchConfig):
    rng = np.random.default_rng(cfg.seeds[0])
    perc = GradientMagnitudeLoss(scales=(1, 2))
    worst = 0.0
    v, z0, z1 = rng.standard_normal((3, 2, 3, 4))
    _, g = flow_matching_loss(v, z0, z1)
    worst = max(worst, relative_error(g, numeric_grad(lambda x: flow_matching_loss(x, z0, z1)[0], v)))
    x, y, w = rng.standard_normal((3, 2, 6, 6, 3))
    _, g = reconstruction_loss(x, y, perc)
    worst = max(worst, relative_error(g, numeric_grad(lambda a: reconstruction_loss(a, y, perc)[0], x)))
    _, g = decoder_distill_loss(x, y, w, perc)
    worst = max(worst, relative_error(g, numeric_grad(lambda a: decoder_distill_loss(a, y, w, perc)[0], x)))
    return worst, 1e-4


def check_dmd_gaussian(cfg: BenchConfig):
    sched = FlowSchedule()
    mu_r, mu_f = 0.5, -1.0
    z = np.full((10_000, 1), mu_f) + np.random.default_rng(cfg.seeds[0]).standard_normal((10_000, 1))
    g = float(dmd_gradient(z, gaussian_scores(mu_r, mu_f, 1.0, sched), seed=cfg.seeds[0]).mean())
    want = quad(lambda t: gaussian_kl_grad(mu_r, mu_f, t), sched.t_min, sched.t_max)[0] / (sched.t_max - sched.t_min)
    return abs(g - want) / abs(want), 0.05


def check_eviction_uniform(cfg: BenchConfig):
    """Uniform eviction keeps every head on the same frame set, on random maps and a live stream."""
    rng = np.random.default_rng(cfg.seeds[0])
    heads = cfg.heads
    for trial in range(5):
        cache = KVCache(heads, 3, "uniform")
        cache.corrupt_hook = cfg.corrupt_eviction
        for f in range(6):
            kv = np.zeros((heads, 1, 2), F32)
            cache.append(kv, kv, np.array([[f, 0, 0]]))
            frames = cache.frames(0)
            evict(cache, CoarseMap.from_frame_scores(rng.random((heads, len(frames))), frames))
            if any(r != cache.retained[0] for r in cache.retained):
                raise CacheInvariantError("uniform eviction: heads diverge")
    scfg = _small_stream(cfg, window=2, evict="uniform")
    lr, nz = _stream_inputs(scfg, 6, cfg.seeds[0])
    st = StreamState.start(scfg)
    for c in st.caches:
        c.corrupt_hook = cfg.corrupt_eviction
    run_stream(st, lr, nz)
    return 0.0, 0.0


def sink_fixture(window: int = 4, heads: int = 2):
    """Cache with ``window + 1`` frames where head 0 sinks its attention onto frame 0.

    Head 0 gives frame 0 the largest mass and frame 1 the smallest; other
    heads score frames by recency.
    """
    n = window + 1
    cache = KVCache(heads, window, "head_wise")
    for f in range(n):
        kv = np.zeros((heads, 1, 2), F32)
        cache.append(kv, kv, np.array([[f, 0, 0]]))
    recency = np.arange(1, n + 1, dtype=float)
    sink = recency.copy()
    sink[0], sink[1] = 100.0, 0.5
    scores = np.stack([sink] + [recency] * (heads - 1))
    return cache, CoarseMap.from_frame_scores(scores, list(range(n)))


def check_eviction_sink(cfg: BenchConfig):
    cache, cmap = sink_fixture()
    evict(cache, cmap)
    ok = 0 in cache.retained[0] and 1 not in cache.retained[0] and 0 not in cache.retained[1]
    return (0.0 if ok else 1.0), 0.0


def check_sliding_window(cfg: BenchConfig):
    cache = KVCache(cfg.heads, 3, "sliding")
    for f in range(7):
        kv = np.zeros((cfg.heads, 1, 2), F32)
        cache.append(kv, kv, np.array([[f, 0, 0]]))
        evict(cache)
    return (0.0 if all(r == {4, 5, 6} for r in cache.retained) else 1.0), 0.0


def check_lookahead(cfg: BenchConfig):
    got = (lookahead_latency(StreamConfig()), lookahead_latency(ChunkConfig(32)))
    return float(abs(got[0] - 8) + abs(got[1] - 32)), 0.0


def check_fixture_roundtrip(cfg: BenchConfig):
    rng = np.random.default_rng(cfg.seeds[0])
    worst = 0.0
    for shape in [(3,), (2, 5), (1, 4, 3, 2), ()]:
        a = rng.standard_normal(shape).astype(F32)
        b = decode_tensor(encode_tensor(a))
        worst = max(worst, 0.0 if np.array_equal(a.view(np.uint32), b.view(np.uint32)) and a.shape == b.shape else 1.0)
    return worst, 0.0


CHECKS: dict[str, Callable] = {
    "softmax_rows": check_softmax,
    "sparse_vs_dense": check_sparse_vs_dense,
    "sparse_masked_vs_dense": check_sparse_masked,
    "stream_vs_batch": check_stream_vs_batch,
    "stream_window_band": check_window_band,
    "stream_causality": check_stream_causality,
    "projin_stream_causal": check_projin,
    "decoder_stream_causal": check_decoder,
    "decoder_param_parity": check_decoder_parity,
    "locality_range": check_locality_range,
    "rope_shift_invariance": check_rope_shift,
    "loss_gradients": check_grad_losses,
    "dmd_gaussian": check_dmd_gaussian,
    "eviction_uniform": check_eviction_uniform,
    "eviction_headwise_sink": check_eviction_sink,
    "eviction_sliding": check_sliding_window,
    "lookahead_latency": check_lookahead,
    "fixture_roundtrip": check_fixture_roundtrip,
}


def run_checks(cfg: BenchConfig, only=None) -> list[CheckResult]:
    names = list(CHECKS) if not only else list(only)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown check(s) {', '.join(unknown)}; choose from {', '.join(CHECKS)}")
    out = []
    for name in names:
        fn = CHECKS[name]
        t0 = time.monotonic()
        try:
            err, tol = fn(cfg)
            res = CheckResult(name, float(err), tol, bool(err <= tol))
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(name, float("inf"), 0.0, False, f"{type(exc).__name__}: {exc}")
        res.seconds = time.monotonic() - t0
        out.append(res)
    return out
