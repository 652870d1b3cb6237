import numpy as np
import pytest

from fvsr.cli import (
    SPARSITY_COLUMNS,
    STREAM_COLUMNS,
    VERIFY_COLUMNS,
    bench_sparsity,
    build_parser,
    csv_text,
    main,
    read_csv,
    stream_demo,
)
from fvsr.config import BenchConfig
from fvsr.fixtures import load_bundle, read_pbm, sha256
from fvsr.tc_decoder import DecoderConfig

SMALL = ["--set", "grid.height=8", "--set", "grid.width=8", "--set", "stream.layers=2",
         "--set", "attention.heads=2", "--set", "attention.head_dim=16"]
TINY_DEC = DecoderConfig(channels=(16, 12, 8, 8))


def small_cfg(**kw):
    return BenchConfig(height=8, width=8, layers=2, heads=2, head_dim=16, **kw)


def run(capsys, argv):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_verify_passes(capsys):
    code, out, _ = run(capsys, ["verify"])
    assert code == 0
    rows = read_csv(out)
    assert out.startswith("# fvsr verify schema=1\n")
    assert {r["check"] for r in rows} >= {"sparse_vs_dense", "stream_vs_batch", "stream_causality", "loss_gradients"}
    assert all(r["status"] == "pass" for r in rows)
    sparse = next(r for r in rows if r["check"] == "sparse_vs_dense")
    assert float(sparse["max_err"]) < 1e-5


def test_verify_corrupt_hook_fails_named(capsys):
    code, out, err = run(capsys, ["verify", "--set", "debug.corrupt_eviction=true", "--only", "eviction_uniform"])
    assert code == 1
    assert "FAILED: eviction_uniform" in err
    assert read_csv(out)[0]["status"] == "FAIL"


def test_verify_unknown_check(capsys):
    code, _, err = run(capsys, ["verify", "--only", "nope"])
    assert code == 2 and "nope" in err


def test_unknown_config_key_rejected(capsys, tmp_path):
    (tmp_path / "c.ini").write_text("[grid]\nframez = 2\n")
    code, _, err = run(capsys, ["show-config", "--config", str(tmp_path / "c.ini")])
    assert code == 2 and "unknown key" in err


def test_show_config_roundtrip(capsys, tmp_path):
    code, out, _ = run(capsys, ["show-config", "--set", "stream.window=3"])
    assert code == 0 and "window = 3" in out
    (tmp_path / "c.ini").write_text(out)
    code, out2, _ = run(capsys, ["show-config", "--config", str(tmp_path / "c.ini")])
    assert out2 == out


@pytest.mark.parametrize("cmd,cols", [("verify", VERIFY_COLUMNS), ("bench-sparsity", SPARSITY_COLUMNS),
                                      ("stream-demo", STREAM_COLUMNS)])
def test_columns_documented_in_help(cmd, cols):
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    text = sub.format_help()
    for col in cols:
        assert col in text


def test_csv_helpers():
    text = csv_text("x", ["a", "b"], [[1, "p q"]])
    assert text.splitlines()[0] == "# fvsr x schema=1"
    assert read_csv(text) == [{"a": "1", "b": "p q"}]


def test_bench_sparsity_rows(capsys, tmp_path):
    out = tmp_path / "b.csv"
    code, _, _ = run(capsys, ["bench-sparsity", "--k-sweep", "2,3,16", "--reps", "1", "--threads", "1",
                              "--set", "grid.frames=4", "--set", "grid.height=16", "--set", "grid.width=32",
                              "--set", "attention.heads=1", "--out", str(out)])
    assert code == 0
    rows = read_csv(out.read_text())
    assert [int(r["k"]) for r in rows] == [2, 3, 16]
    for r in rows:
        assert abs(float(r["flop_ratio"]) - float(r["density"])) <= 0.01 * float(r["density"])
    assert float(rows[-1]["density"]) == 1.0
    assert float(rows[-1]["max_abs_err_vs_dense"]) < 1e-5
    assert float(rows[0]["density"]) == pytest.approx(2 / 16)


def test_bench_sparsity_requires_k(capsys):
    with pytest.raises(SystemExit):
        main(["bench-sparsity"])
    assert main(["bench-sparsity", "--k-sweep", ","]) == 2


def test_stream_demo_cli(capsys, tmp_path):
    code, out, err = run(capsys, ["stream-demo", "--frames", "4", "--window", "2", "--evict", "headwise",
                                  "--dump-dir", str(tmp_path / "pgm")] + SMALL)
    assert code == 0 and "lookahead_frames=8" in err
    rows = read_csv(out)
    assert len(rows) == 2 and all(r["lookahead_frames"] == "8" for r in rows)
    assert set(rows[0]) == set(STREAM_COLUMNS)
    assert len(list((tmp_path / "pgm").glob("*.pgm"))) == 16


def test_stream_demo_too_short(capsys):
    code, _, err = run(capsys, ["stream-demo", "--frames", "1"] + SMALL)
    assert code == 2 and "lookahead" in err


def test_stream_demo_prefix_equivalence():
    _, full, hr_full = stream_demo(small_cfg(window=12), 12, decoder=TINY_DEC)
    _, short, hr_short = stream_demo(small_cfg(window=4), 12, decoder=TINY_DEC)
    assert np.max(np.abs(full[:4] - short[:4])) < 1e-5
    assert np.max(np.abs(hr_full[:16] - hr_short[:16])) < 1e-5
    assert np.max(np.abs(full[-1] - short[-1])) > 1e-4


def test_stream_demo_steady_state():
    rows, _, _ = stream_demo(small_cfg(window=4), 24, decoder=TINY_DEC)
    times = np.array([r["step_wall_time_ms"] for r in rows if r["t"] >= 10])
    assert len(times) >= 5
    assert times.std() / times.mean() < 0.3
    assert all(r["cache_frames"] <= 4 for r in rows)


def test_gen_fixtures_deterministic(capsys, tmp_path):
    for d in ("a", "b"):
        assert main(["gen-fixtures", "--seed", "3", "--out", str(tmp_path / d)]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    main(["gen-fixtures", "--seed", "4", "--out", str(tmp_path / "c")])
    assert (tmp_path / "a" / "attn__q.fvsr").read_bytes() != (tmp_path / "c" / "attn__q.fvsr").read_bytes()


def test_gen_fixtures_manifest(tmp_path):
    import json

    main(["gen-fixtures", "--seed", "0", "--out", str(tmp_path)])
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    listed = {e["file"] for e in manifest["tensors"]} | {b["file"] for b in manifest["meta"]["bitmaps"]}
    assert listed == {p.name for p in tmp_path.iterdir()} - {"manifest.json"}
    tensors = load_bundle(tmp_path)  # verifies checksums
    for e in manifest["tensors"]:
        assert list(tensors[e["name"]].shape) == e["shape"]
        raw = (tmp_path / e["file"]).read_bytes()
        from fvsr.fixtures import encode_tensor

        assert encode_tensor(tensors[e["name"]]) == raw
    for b in manifest["meta"]["bitmaps"]:
        assert sha256((tmp_path / b["file"]).read_bytes()) == b["sha256"]
        assert list(read_pbm(tmp_path / b["file"]).shape) == b["shape"]


def test_gen_fixtures_needs_out(capsys):
    assert main(["gen-fixtures"]) == 2


def test_threads_env(monkeypatch, capsys):
    monkeypatch.setenv("FVSR_THREADS", "1")
    assert main(["show-config"]) == 0


def test_bench_sparsity_saturated_overhead_only():
    from threadpoolctl import threadpool_limits

    cfg = BenchConfig(frames=8, height=32, width=32, heads=1, head_dim=32)
    with threadpool_limits(1):
        row = bench_sparsity(cfg, [64], reps=5)[0]
    assert row["density"] == 1.0 and row["flop_ratio"] == 1.0
    assert 0.8 <= row["speedup"] <= 1.2
