"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic     8 bytes  b"SNSRCKPT"
    version   uint32
    hlen      uint32   length of the JSON header
    header    hlen bytes, UTF-8 JSON: {"field": FieldConfig, "meta": {...},
              "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload   raw little-endian tensor data, offsets relative to payload start

Tensors are stored byte-for-byte, so a save/load round trip is exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .field import FieldConfig, ScaleField

MAGIC = b"SNSRCKPT"
VERSION = 1

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.int32: "<i4"}


def _state(field: ScaleField) -> dict[str, torch.Tensor]:
    # the triplane scale range is a persistent buffer, so it is part of the state
    return {k: v.detach().cpu().contiguous() for k, v in field.state_dict().items()}


def save_checkpoint(field: ScaleField, path, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in _state(field).items():
        code = _DTYPES.get(t.dtype)
        if code is None:
            raise TypeError(f"cannot serialize tensor {name} of dtype {t.dtype}")
        raw = t.numpy().astype(code, copy=False).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"field": field.cfg.to_dict(), "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
            for c in chunks:
                fh.write(c)
        tmp.replace(path)
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Header dict and tensors of a checkpoint file."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise ValueError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(data, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)), offset=start)
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return header, tensors


def load_checkpoint(path) -> tuple[ScaleField, dict]:
    """Rebuild the field stored in ``path``; returns (field, meta)."""
    header, tensors = read_checkpoint(path)
    field = ScaleField(FieldConfig.from_dict(header["field"]))
    dtype = tensors["hidden.weight"].dtype
    if dtype != torch.float32:
        field.to(dtype)  # float64 buffers stay float64
    missing, unexpected = field.load_state_dict(tensors, strict=False)
    if missing or unexpected:
        raise ValueError(f"{path}: checkpoint does not match the field (missing {missing}, unexpected {unexpected})")
    return field, header["meta"]
