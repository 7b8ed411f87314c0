"""``HGW1`` container: config JSON block plus a named tensor table.

Layout (little-endian)::

    b"HGW1" | u64 json_len | json utf-8 | u32 count |
    count x (u32 name_len | name utf-8 | HGT1 tensor blob)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor, tensor_from_bytes, tensor_to_bytes

MAGIC = b"HGW1"


def write_hgw(path, config: dict, tensors: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps(config, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<Q", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        raw = name.encode()
        value = tensors[name]
        chunks += [struct.pack("<I", len(raw)), raw, tensor_to_bytes(value if isinstance(value, Tensor) else np.asarray(value))]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def read_hgw(path) -> tuple[dict, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path} is not an HGW1 file")
    (n_meta,) = struct.unpack_from("<Q", buf, 4)
    pos = 12
    config = json.loads(buf[pos: pos + n_meta].decode())
    pos += n_meta
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n_name,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos: pos + n_name].decode()
        pos += n_name
        t, pos = tensor_from_bytes(buf, pos)
        tensors[name] = t.data
    return config, tensors
