"""Self-describing binary parameter files.

Layout (all integers little-endian u32)::

    b"LIMTR"  version
    repeated until EOF:
        name_len  name(utf-8)  rank  dim_0 ... dim_{rank-1}  float32 payload (LE)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LIMTR"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic at byte offset 0")
    pos = len(MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated {what} at byte offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    arrays: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * count, f"payload of {name!r}"), dtype="<f4")
        arrays[name] = data.reshape(dims).astype(np.float32)
    return arrays


def save(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
