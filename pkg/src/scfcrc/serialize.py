"""Binary checkpoint container shared by the filter and the MoE head.

Layout (all integers little-endian)::

    8s   magic b"SCFCRCCK"
    u32  format version
    u32  length of the UTF-8 JSON config echo, then the JSON bytes
    u32  number of tensors, then per tensor in declaration order:
         u16 name length, name bytes, u8 ndim, ndim x u32 dims,
         prod(dims) float32 values, row-major
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"SCFCRCCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: dict, tensors) -> Path:
    path = Path(path)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f4", order="C")  # keeps 0-d shapes
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    version, cfg_len = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 16
    config = json.loads(buf[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            tensors[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return config, tensors


def module_tensors(module) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, v.detach().cpu().numpy()) for k, v in module.state_dict().items())


def load_module_tensors(module, tensors) -> None:
    import torch

    state = OrderedDict((k, torch.from_numpy(np.array(v))) for k, v in tensors.items())
    module.load_state_dict(state)
