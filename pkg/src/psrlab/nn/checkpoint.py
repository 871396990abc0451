"""The ``PSRL`` tensor container.

Layout (all integers little-endian)::

    b"PSRL" | u32 version | u32 count |
    count x ( u16 name_len | utf-8 name | u8 dtype (0=f32, 1=i8) | u8 rank
              | rank x u32 dim | raw payload )

Model structure travels as JSON bytes in an int8 tensor named ``__meta__``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import Model
from .tensor import Tensor

MAGIC = b"PSRL"
VERSION = 1
META_KEY = "__meta__"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("i1")}
_TAGS = {np.dtype("float32"): 0, np.dtype("int8"): 1}


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<II", version, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> tuple[int, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        off = 12
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BB", blob, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            dt = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(blob):
                raise CheckpointError(f"{name}: truncated payload")
            out[name] = np.frombuffer(blob, dt, int(np.prod(dims, dtype=np.int64)),
                                      off).reshape(dims).copy()
            off += nbytes
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"malformed container: {exc}") from exc
    return version, out


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    tensors = dict(tensors)
    if meta is not None:
        tensors[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.int8)
    Path(path).write_bytes(encode(tensors))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict | None]:
    _, tensors = decode(Path(path).read_bytes())
    meta = tensors.pop(META_KEY, None)
    if meta is not None:
        meta = json.loads(meta.tobytes().decode())
    return tensors, meta


def save_model(model: Model, path, extra: dict | None = None) -> None:
    meta = {"type": "model", "model": model.describe(), **(extra or {})}
    state = {k: t.data.astype(np.float32) for k, t in model.params.items()}
    save_tensors(path, state, meta)


def load_model(path) -> Model:
    tensors, meta = load_tensors(path)
    if not meta or meta.get("type") != "model":
        raise CheckpointError(f"{path} is not a float model checkpoint")
    return Model.from_description(meta["model"], {k: Tensor(v) for k, v in tensors.items()})
