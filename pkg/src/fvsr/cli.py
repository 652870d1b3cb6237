"""``fvsr`` command-line harness.

Every CSV this tool writes starts with a ``# fvsr <command> schema=N`` line
followed by a header row; the columns of each command are listed in its
``--help``.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import statistics
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import BenchConfig, apply_overrides, dump_config, load_config
from .errors import FVSRError
from .fixtures import save_bundle, sha256, write_pbm, write_pgm
from .grid import TokenGrid
from .kv_stream import StreamState, lookahead_latency, step
from .masks import (
    BoundaryMode,
    CausalSpec,
    LocalityWindow,
    build_causal_mask,
    build_locality_mask,
)
from .sparse_attn import (
    partition_positions,
    plan_sparse,
    sparse_attention_exec,
    sparsity_report,
)
from .tc_decoder import DecoderConfig, DecoderState, DecoderWeights, decode
from .tensor_core import F32, dense_attention_oracle, dense_attention_tiled
from .verify import run_checks, sink_fixture

SCHEMA_VERSION = 1

VERIFY_COLUMNS = {
    "check": "name of the oracle check",
    "max_err": "largest deviation from the reference (0 for exact checks)",
    "tol": "tolerance the deviation must not exceed",
    "status": "pass or FAIL",
    "seconds": "wall time of the check",
    "detail": "exception text when the check crashed",
}
SPARSITY_COLUMNS = {
    "k": "key blocks selected per query block",
    "density": "selected / allowed block pairs",
    "flop_ratio": "executed attention FLOPs / dense FLOPs (4d+3 per token pair)",
    "wall_ms_sparse": "median wall time of plan + sparse execution over all heads",
    "wall_ms_dense": "median wall time of the query-tiled dense kernel over all heads",
    "speedup": "wall_ms_dense / wall_ms_sparse",
    "max_abs_err_vs_dense": "max |sparse - unrestricted dense| over all heads",
}
STREAM_COLUMNS = {
    "t": "first latent frame of the step",
    "retained_frames": "frames retained per layer (union over heads), layers separated by |",
    "cache_frames": "mean retained frames per (layer, head) after eviction",
    "density": "mean block density over layers and heads",
    "step_wall_time_ms": "DiT step time, including proj-in",
    "decode_wall_time_ms": "tiny decoder time for the step",
    "lookahead_frames": "LR frames that must arrive before the first output",
}


def _columns_help(cols: dict) -> str:
    return "CSV columns:\n" + "\n".join(f"  {k:<22} {v}" for k, v in cols.items())


def csv_text(command: str, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# fvsr {command} schema={SCHEMA_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    """Parse CSV written by this tool (comment lines skipped)."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def median_ms(fn, reps: int, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(max(1, reps)):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


# ---------------------------------------------------------------------------
# commands


def cmd_verify(cfg: BenchConfig, only=None):
    results = run_checks(cfg, only)
    rows = [[r.name, f"{r.max_err:.3e}", f"{r.tol:.1e}", "pass" if r.passed else "FAIL", f"{r.seconds:.2f}", r.detail]
            for r in results]
    failed = [r.name for r in results if not r.passed]
    return csv_text("verify", list(VERIFY_COLUMNS), rows), failed


def bench_sparsity(cfg: BenchConfig, k_sweep, reps: int | None = None, seed: int | None = None):
    """Rows of :data:`SPARSITY_COLUMNS` for each ``k``; timings are medians after one warm-up run."""
    reps = cfg.repetitions if reps is None else reps
    seed = cfg.seeds[0] if seed is None else seed
    grid = TokenGrid(cfg.frames, cfg.height, cfg.width)
    part = partition_positions(grid.positions(), (min(2, cfg.frames), 8, 8))
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((cfg.heads, len(grid), cfg.head_dim)).astype(F32) for _ in range(3))
    dense = [dense_attention_oracle(q[h], k[h], v[h]) for h in range(cfg.heads)]
    dense_ms = median_ms(lambda: [dense_attention_tiled(q[h], k[h], v[h]) for h in range(cfg.heads)], reps)

    rows = []
    for kk in k_sweep:
        kk = min(int(kk), part.block_num)

        def run():
            out = []
            for h in range(cfg.heads):
                plan = plan_sparse(q[h], k[h], part, None, kk)
                out.append((plan, sparse_attention_exec(q[h], k[h], v[h], plan)))
            return out

        outs = run()
        ms = median_ms(run, reps)
        reps_ = [sparsity_report(p) for p, _ in outs]
        err = max(float(np.max(np.abs(o - d))) for (_, o), d in zip(outs, dense))
        density = float(np.mean([r.density for r in reps_]))
        flop_ratio = sum(r.executed_flops for r in reps_) / sum(r.dense_flops for r in reps_)
        rows.append({"k": kk, "density": density, "flop_ratio": flop_ratio, "wall_ms_sparse": ms,
                     "wall_ms_dense": dense_ms, "speedup": dense_ms / ms, "max_abs_err_vs_dense": err})
    return rows


def _fmt_sparsity(rows):
    return [[r["k"], f"{r['density']:.6f}", f"{r['flop_ratio']:.6f}", f"{r['wall_ms_sparse']:.3f}",
             f"{r['wall_ms_dense']:.3f}", f"{r['speedup']:.3f}", f"{r['max_abs_err_vs_dense']:.3e}"] for r in rows]


def synthetic_lr(n_lr: int, height: int, width: int, seed: int = 0) -> np.ndarray:
    """Drifting sinusoid pattern in [-1, 1], ``[n_lr × height × width × 3]``."""
    rng = np.random.default_rng(seed)
    fy, fx, ph = rng.uniform(0.05, 0.2, 3), rng.uniform(0.05, 0.2, 3), rng.uniform(0, 2 * np.pi, 3)
    t = np.arange(n_lr)[:, None, None, None]
    y = np.arange(height)[None, :, None, None]
    x = np.arange(width)[None, None, :, None]
    return np.sin(fy * (y + 0.7 * t) + fx * (x + 1.3 * t) + ph).astype(F32)


def stream_demo(cfg: BenchConfig, n_frames: int, seed: int | None = None, decoder: DecoderConfig | None = None,
                dump_dir=None):
    """Run proj-in → streaming DiT → tiny decoder over ``n_frames`` latent frames.

    Returns ``(rows, latents, hr_frames)``; ``rows`` follow :data:`STREAM_COLUMNS`.
    """
    scfg = cfg.stream_config()
    seed = cfg.seeds[0] if seed is None else seed
    fps, per = scfg.frames_per_step, scfg.lr_frames_per_step
    lookahead = lookahead_latency(scfg)
    if n_frames * scfg.projin.clip_len < lookahead or n_frames % fps:
        raise FVSRError(f"need a whole number of {fps}-frame steps covering the {lookahead}-frame lookahead")
    lr = synthetic_lr(n_frames * scfg.projin.clip_len, scfg.height * 8, scfg.width * 8, seed)
    noise = np.random.default_rng(seed + 7).standard_normal(
        (n_frames, scfg.height, scfg.width, scfg.model.latent_channels)).astype(F32)
    dcfg = decoder or DecoderConfig(latent_channels=scfg.model.latent_channels)
    dweights = DecoderWeights.init(dcfg, seed + 2)
    dstate = DecoderState()
    state = StreamState.start(scfg, seed=seed)
    rows, lat, hr = [], [], []
    for i in range(n_frames // fps):
        z = step(state, lr[i * per : (i + 1) * per], noise[i * fps : (i + 1) * fps])
        t0 = time.perf_counter()
        x = decode(z, lr[i * per : (i + 1) * per], dcfg, dweights, dstate)
        dec_ms = (time.perf_counter() - t0) * 1e3
        tr = state.trace[-1]
        occ = float(np.mean([len(r) for c in state.caches for r in c.retained]))
        rows.append({"t": tr.t, "retained_frames": "|".join(" ".join(map(str, r)) for r in tr.retained),
                     "cache_frames": occ, "density": tr.density, "step_wall_time_ms": tr.wall_ms,
                     "decode_wall_time_ms": dec_ms, "lookahead_frames": lookahead})
        lat.append(z)
        hr.append(x)
    latents, frames = np.concatenate(lat), np.concatenate(hr)
    if dump_dir is not None:
        d = Path(dump_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, f in enumerate(frames):
            write_pgm(d / f"frame_{i:04d}.pgm", np.tanh(f))
    return rows, latents, frames


def _fmt_stream(rows):
    return [[r["t"], r["retained_frames"], f"{r['cache_frames']:.2f}", f"{r['density']:.6f}",
             f"{r['step_wall_time_ms']:.3f}", f"{r['decode_wall_time_ms']:.3f}", r["lookahead_frames"]] for r in rows]


def gen_fixtures(seed: int, out_dir) -> Path:
    """Deterministic fixture bundle; returns the manifest path."""
    rng = np.random.default_rng(seed)
    f32 = lambda *s: rng.standard_normal(s).astype(F32)
    grid = TokenGrid(4, 16, 16)
    pos = grid.positions()
    tensors = {
        "attn/q": f32(4, len(grid), 32), "attn/k": f32(4, len(grid), 32), "attn/v": f32(4, len(grid), 32),
        "attn/positions": pos.astype(F32),
        "rope/x": f32(64, 32), "rope/positions": rng.integers(0, 64, (64, 3)).astype(F32),
        "projin/lr": f32(8, 32, 32, 3),
        "decoder/latents": f32(2, 2, 2, 16), "decoder/lr": f32(8, 16, 16, 3),
        "losses/pred": f32(2, 8, 8, 3), "losses/gt": f32(2, 8, 8, 3), "losses/ref": f32(2, 8, 8, 3),
        "losses/z0": f32(2, 4, 4, 16), "losses/z1": f32(2, 4, 4, 16),
    }
    _, sink = sink_fixture()
    for h, s in enumerate(sink.mass):
        tensors[f"evict/sink_scores_h{h}"] = np.asarray(s, F32)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lpos = TokenGrid(2, 24, 24).positions()
    bitmaps = {
        "causal_4x16x16.pbm": build_causal_mask(CausalSpec(tuple(pos[:, 0].tolist()))),
        "locality_preserved_2x24x24.pbm": build_locality_mask(LocalityWindow(BoundaryMode.PRESERVED, 5, 5, 24, 24), lpos),
        "locality_truncated_2x24x24.pbm": build_locality_mask(LocalityWindow(BoundaryMode.TRUNCATED, 5, 5, 24, 24), lpos),
    }
    meta = {"seed": seed, "generator": f"fvsr {__version__}", "bitmaps": []}
    for name, mask in bitmaps.items():
        write_pbm(out / name, mask)
        meta["bitmaps"].append({"file": name, "shape": list(mask.shape), "sha256": sha256((out / name).read_bytes())})
    return save_bundle(out, tensors, meta)


# ---------------------------------------------------------------------------
# argument handling


def _threads_ctx(n):
    if n is None:
        env = os.environ.get("FVSR_THREADS")
        n = int(env) if env else None
    return threadpool_limits(limits=n) if n else nullcontext()


def _emit(text: str, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="benchmark config file ([section] key = value)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--threads", type=int, help="BLAS threads (default: $FVSR_THREADS or library default)")
    common.add_argument("--out", help="write output here instead of stdout")

    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="fvsr", description=__doc__, formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"fvsr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", parents=[common], formatter_class=fmt, help="run the oracle suite",
                       epilog=_columns_help(VERIFY_COLUMNS) + "\n\nExit status 1 names every failed check on stderr.")
    v.add_argument("--only", action="append", help="run just this check (repeatable)")

    b = sub.add_parser("bench-sparsity", parents=[common], formatter_class=fmt, help="sparse vs dense attention sweep",
                       epilog=_columns_help(SPARSITY_COLUMNS))
    b.add_argument("--k-sweep", required=True, help="comma-separated k values")
    b.add_argument("--reps", type=int, help="timed repetitions (default: run.repetitions)")

    s = sub.add_parser("stream-demo", parents=[common], formatter_class=fmt, help="streaming pipeline demo",
                       epilog=_columns_help(STREAM_COLUMNS))
    s.add_argument("--frames", type=int, help="latent frames to stream (default: stream.n_frames)")
    s.add_argument("--window", type=int)
    s.add_argument("--evict", choices=["sliding", "uniform", "headwise"])
    s.add_argument("--locality", choices=["off", "preserved", "truncated"])
    s.add_argument("--extent", type=int, help="locality window extent in latent tokens")
    s.add_argument("--dump-dir", help="write decoded frames as PGM images here")

    g = sub.add_parser("gen-fixtures", parents=[common], formatter_class=fmt, help="write deterministic fixtures")
    g.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("show-config", parents=[common], help="print the effective config")
    c.set_defaults(out=None)
    return p


def _config(args) -> BenchConfig:
    cfg = load_config(args.config) if args.config else BenchConfig()
    return apply_overrides(cfg, args.set) if args.set else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        with _threads_ctx(args.threads if args.threads is not None else (cfg.threads or None)):
            return _dispatch(args, cfg)
    except FVSRError as exc:
        print(f"fvsr: error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args, cfg: BenchConfig) -> int:
    if args.command == "verify":
        text, failed = cmd_verify(cfg, args.only)
        _emit(text, args.out)
        for name in failed:
            print(f"FAILED: {name}", file=sys.stderr)
        return 1 if failed else 0
    if args.command == "bench-sparsity":
        ks = [int(x) for x in args.k_sweep.split(",") if x.strip()]
        if not ks:
            raise FVSRError("--k-sweep needs at least one value")
        rows = bench_sparsity(cfg, ks, args.reps)
        _emit(csv_text("bench-sparsity", list(SPARSITY_COLUMNS), _fmt_sparsity(rows)), args.out)
        return 0
    if args.command == "stream-demo":
        over = [f"stream.{k}={v}" for k, v in (("window", args.window), ("evict", args.evict)) if v is not None]
        over += [f"attention.{k}={v}" for k, v in (("locality", args.locality), ("extent", args.extent)) if v is not None]
        cfg = apply_overrides(cfg, over) if over else cfg
        rows, _, _ = stream_demo(cfg, args.frames or cfg.n_frames, dump_dir=args.dump_dir)
        _emit(csv_text("stream-demo", list(STREAM_COLUMNS), _fmt_stream(rows)), args.out)
        print(f"lookahead_frames={rows[0]['lookahead_frames']}", file=sys.stderr)
        return 0
    if args.command == "gen-fixtures":
        if not args.out:
            raise FVSRError("gen-fixtures needs --out DIR")
        path = gen_fixtures(args.seed, args.out)
        print(f"wrote {path}", file=sys.stderr)
        return 0
    _emit(dump_config(cfg), args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
