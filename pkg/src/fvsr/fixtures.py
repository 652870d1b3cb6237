"""Binary tensor fixture format, weight bundles, and debug bitmaps.

Layout of one tensor file (all integers little-endian)::

    b"FVSR" | version: u32 | rank: u32 | extents: rank × u64 | payload: float32 LE

A weight bundle is a directory with one tensor file per name plus
``manifest.json`` listing every tensor's file, shape and sha256.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FixtureFormatError

MAGIC = b"FVSR"
VERSION = 1
_HEADER = struct.Struct("<4sII")


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    head = _HEADER.pack(MAGIC, VERSION, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + extents + np.ascontiguousarray(arr).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FixtureFormatError("truncated header")
    magic, version, rank = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FixtureFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FixtureFormatError(f"unsupported format version {version}")
    off = _HEADER.size
    if len(buf) < off + 8 * rank:
        raise FixtureFormatError("truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != 4 * count:
        raise FixtureFormatError(f"payload holds {len(buf) - off} bytes, expected {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    return data.astype(np.float32).reshape(shape)


def write_tensor(path, arr) -> bytes:
    """Write ``arr`` to ``path``; returns the encoded bytes."""
    raw = encode_tensor(arr)
    Path(path).write_bytes(raw)
    return raw


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def sha256(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def save_bundle(directory, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write named tensors plus a manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        fname = name.replace("/", "__") + ".fvsr"
        raw = write_tensor(directory / fname, tensors[name])
        entries.append(
            {"name": name, "file": fname, "shape": list(np.shape(tensors[name])), "sha256": sha256(raw)}
        )
    manifest = {"format": "FVSR", "version": VERSION, "tensors": entries}
    if meta:
        manifest["meta"] = meta
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_bundle(directory, verify: bool = True) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    out = {}
    for entry in manifest["tensors"]:
        raw = (directory / entry["file"]).read_bytes()
        if verify and sha256(raw) != entry["sha256"]:
            raise FixtureFormatError(f"checksum mismatch for {entry['name']}")
        arr = decode_tensor(raw)
        if list(arr.shape) != entry["shape"]:
            raise FixtureFormatError(f"shape mismatch for {entry['name']}")
        out[entry["name"]] = arr
    return out


def write_pbm(path, mask) -> None:
    """Dump a boolean mask as a binary PBM (P4); allowed entries are black."""
    mask = np.asarray(mask, dtype=bool)
    rows, cols = mask.shape
    packed = np.packbits(mask, axis=1)
    Path(path).write_bytes(f"P4\n{cols} {rows}\n".encode() + packed.tobytes())


def read_pbm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 2)
    if parts[0] != b"P4":
        raise FixtureFormatError("not a binary PBM")
    cols, rows = map(int, parts[1].split())
    bits = np.frombuffer(parts[2], dtype=np.uint8).reshape(rows, -1)
    return np.unpackbits(bits, axis=1)[:, :cols].astype(bool)


def write_pgm(path, image) -> None:
    """Dump a 2-D image (values nominally in [-1, 1]) as an 8-bit PGM (P5)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    u8 = np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    rows, cols = u8.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode() + u8.tobytes())
