"""Flat binary checkpoint container.

Layout (all integers little-endian):
    magic ``OWT1`` | u32 header_len | header JSON (format_version, manifest)
    | u32 record_count | records.
Each record: u16 name_len | name utf-8 | u8 ndim | u32 dims | float32 payload.
Names are stable hierarchical strings like ``decoder.layer0.attn.wq``.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"OWT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays, manifest=None):
    """Write named float arrays (cast to little-endian float32) plus a manifest."""
    header = json.dumps({"format_version": FORMAT_VERSION,
                         "manifest": manifest or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (name -> float32 array, manifest dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    return _parse(raw, str(path))


def _parse(raw, origin):
    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{origin}: truncated while reading {what}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{origin}: bad magic, not a checkpoint file")
    (hlen,) = struct.unpack("<I", take(4, "header length"))
    try:
        header = json.loads(take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{origin}: corrupt header ({e})")
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{origin}: unsupported format_version {header.get('format_version')!r}")
    (count,) = struct.unpack("<I", take(4, "record count"))
    arrays = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"record {i} name length"))
        name = take(nlen, f"record {i} name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"'{name}' ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"'{name}' dims"))
        n = int(np.prod(dims)) if ndim else 1
        payload = take(4 * n, f"'{name}' payload")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if pos != len(raw):
        raise CheckpointError(f"{origin}: {len(raw) - pos} trailing bytes after records")
    return arrays, header.get("manifest", {})
