"""TNSR1 container: a magic header followed by named float32 records.

Record layout (all little endian)::

    u16 name length | name bytes (utf-8) | u8 rank | u32 extent * rank | f32 data
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"TNSR1\0"


def dumps(records: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"record {name!r} too large for TNSR1")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:len(MAGIC)] != MAGIC:
        raise FormatError("missing TNSR1 magic at offset 0")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)
    end = len(buf)
    while pos < end:
        try:
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"truncated TNSR1 record header at byte {pos}") from exc
        count = int(np.prod(shape)) if rank else 1
        nbytes = 4 * count
        if pos + nbytes > end:
            raise FormatError(f"record {name!r} needs {nbytes} bytes at offset {pos}, file has {end - pos}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    return out


def save(path, records: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.write_bytes(dumps(records))
    return path


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
