import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fvsr.errors import FixtureFormatError
from fvsr.fixtures import (
    MAGIC,
    decode_tensor,
    encode_tensor,
    load_bundle,
    read_pbm,
    read_tensor,
    save_bundle,
    write_pbm,
    write_pgm,
    write_tensor,
)

arrays = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5),
                    elements=st.floats(width=32, allow_nan=False))


@given(arrays)
def test_roundtrip_bit_exact(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.shape == arr.shape and out.dtype == np.float32
    assert out.tobytes() == arr.tobytes()


def test_layout():
    raw = encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert raw[:4] == MAGIC
    assert struct.unpack_from("<II", raw, 4) == (1, 2)
    assert struct.unpack_from("<2Q", raw, 12) == (2, 3)
    assert np.frombuffer(raw[28:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_nan_and_inf_survive():
    arr = np.array([np.nan, np.inf, -np.inf, -0.0], np.float32)
    assert decode_tensor(encode_tensor(arr)).tobytes() == arr.tobytes()


@pytest.mark.parametrize("mutate,msg", [
    (lambda r: b"XVSR" + r[4:], "magic"),
    (lambda r: r[:4] + struct.pack("<I", 2) + r[8:], "version"),
    (lambda r: r[:6], "header"),
    (lambda r: r[:16], "extents"),
    (lambda r: r[:-4], "payload"),
    (lambda r: r + b"\0", "payload"),
])
def test_malformed(mutate, msg):
    raw = encode_tensor(np.ones((2, 2), np.float32))
    with pytest.raises(FixtureFormatError, match=msg):
        decode_tensor(mutate(raw))


def test_file_io(tmp_path):
    arr = np.linspace(-1, 1, 12, dtype=np.float32).reshape(3, 4)
    raw = write_tensor(tmp_path / "a.fvsr", arr)
    assert (tmp_path / "a.fvsr").read_bytes() == raw
    assert np.array_equal(read_tensor(tmp_path / "a.fvsr"), arr)


def test_bundle(tmp_path):
    tensors = {"x/y": np.ones((2, 3), np.float32), "s": np.float32(3.5)}
    path = save_bundle(tmp_path, tensors, {"seed": 1})
    manifest = json.loads(path.read_text())
    assert [e["name"] for e in manifest["tensors"]] == ["s", "x/y"]
    assert manifest["meta"] == {"seed": 1}
    out = load_bundle(tmp_path)
    assert out["s"].shape == () and out["s"] == 3.5
    assert np.array_equal(out["x/y"], tensors["x/y"])
    (tmp_path / "x__y.fvsr").write_bytes(encode_tensor(np.zeros((2, 3))))
    with pytest.raises(FixtureFormatError, match="checksum"):
        load_bundle(tmp_path)
    assert load_bundle(tmp_path, verify=False)["x/y"].sum() == 0


def test_bundle_deterministic(tmp_path):
    t = {"a": np.arange(4, dtype=np.float32)}
    save_bundle(tmp_path / "1", t)
    save_bundle(tmp_path / "2", t)
    for name in ("a.fvsr", "manifest.json"):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "2" / name).read_bytes()


@given(hnp.arrays(bool, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=20)))
def test_pbm_roundtrip(mask):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        write_pbm(Path(d) / "m.pbm", mask)
        assert np.array_equal(read_pbm(Path(d) / "m.pbm"), mask)


def test_pbm_rejects_other_formats(tmp_path):
    (tmp_path / "x.pbm").write_bytes(b"P1\n1 1\n1")
    with pytest.raises(FixtureFormatError):
        read_pbm(tmp_path / "x.pbm")


def test_pgm(tmp_path):
    img = np.array([[-1.0, 0.0], [1.0, 2.0]])
    write_pgm(tmp_path / "i.pgm", img)
    raw = (tmp_path / "i.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert list(raw[-4:]) == [0, 128, 255, 255]
    write_pgm(tmp_path / "c.pgm", np.zeros((3, 5, 3)))
    assert (tmp_path / "c.pgm").read_bytes().startswith(b"P5\n5 3\n")
