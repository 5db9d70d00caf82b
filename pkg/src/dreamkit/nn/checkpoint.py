"""Binary checkpoint files for named float64 arrays.

Layout, all integers little-endian::

    magic        8 bytes   b"DRMCKPT1"
    meta_len     u32       length of the UTF-8 JSON metadata block
    meta         bytes     JSON object (sorted keys)
    n_entries    u32
    layer table  n_entries x { name_len u16, name bytes, ndim u8, dims u32 * ndim }
    payload      raw little-endian float64 data of each entry, in table order

Round trips are bit-exact because the payload is the raw IEEE-754 bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..errors import ValidationError

MAGIC = b"DRMCKPT1"


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in arrays.values():
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if blob[:8] != MAGIC:
        raise ValidationError("not a checkpoint file (bad magic)")
    try:
        pos = 8
        (meta_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        table = []
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nl].decode("utf-8")
            pos += nl
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            table.append((name, shape))
        arrays = {}
        for name, shape in table:
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise ValidationError(f"checkpoint truncated inside entry {name!r}")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"malformed checkpoint: {exc}") from exc
    if pos != len(blob):
        raise ValidationError(f"checkpoint has {len(blob) - pos} trailing bytes")
    return arrays, meta


def save(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
