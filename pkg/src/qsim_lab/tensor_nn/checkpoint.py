"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic     8 bytes   b"QSIMCKPT"
    version   uint8     1
    count     uint32    number of records
    record * count:
        name_len  uint16
        name      utf-8 bytes
        ndim      uint8
        dims      uint32 * ndim
        values    float64 * prod(dims), row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .nn import ParamSet
from .tensor import Tensor

MAGIC = b"QSIMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: ParamSet) -> bytes:
    out = [MAGIC, struct.pack("<BI", VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", t.data.ndim))
        out.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(out)


def loads(blob: bytes) -> ParamSet:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic header")
    version, count = struct.unpack_from("<BI", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 13
    params: ParamSet = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            values = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64)
            pos += 8 * n
            params[name] = Tensor(values.reshape(shape), requires_grad=True)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last record")
    return params


def save(params: ParamSet, path) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> ParamSet:
    return loads(Path(path).read_bytes())
