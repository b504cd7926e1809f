"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"CAML1"
    u32 section count
    per section: u16 name length, name (utf-8), u8 type (0 = JSON, 1 = tensor),
                 u64 payload length, payload
    u32 CRC-32 of every preceding byte

JSON payloads are canonical (sorted keys, no whitespace). Tensor payloads are
``u32 ndim, ndim x u64 dims, float64 data`` in C order.
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CAML1"
_JSON, _TENSOR = 0, 1


class CheckpointError(ValueError):
    """Unreadable or corrupt checkpoint file."""


class HashMismatchError(CheckpointError):
    """Checkpoint was built against a different vocabulary or label space."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", arr.ndim) + b"".join(struct.pack("<Q", d) for d in arr.shape)
    return head + arr.tobytes()


def write_container(path, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", 1 + len(tensors)))
    sections = [("meta", _JSON, canonical_json(meta))]
    sections += [(name, _TENSOR, _tensor_bytes(arr)) for name, arr in tensors.items()]
    for name, kind, payload in sections:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<BQ", kind, len(payload)))
        buf.write(payload)
    body = buf.getvalue()
    data = body + struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError(f"{path}: truncated section")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    meta, tensors = None, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        kind, plen = struct.unpack("<BQ", take(9))
        payload = take(plen)
        if kind == _JSON:
            meta = json.loads(payload.decode("utf-8"))
        elif kind == _TENSOR:
            (ndim,) = struct.unpack_from("<I", payload, 0)
            shape = struct.unpack_from(f"<{ndim}Q", payload, 4)
            off = 4 + 8 * ndim
            arr = np.frombuffer(payload, dtype="<f8", offset=off)
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"{path}: tensor {name!r} size does not match its header")
            tensors[name] = arr.reshape(shape).astype(np.float64)
        else:
            raise CheckpointError(f"{path}: unknown section type {kind}")
    if pos != len(body) or meta is None:
        raise CheckpointError(f"{path}: malformed section table")
    return meta, tensors
