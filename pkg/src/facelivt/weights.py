"""Binary weight file: ``FLVT`` magic, version, tensor table, FNV-1a 64 trailer.

Layout (little-endian)::

    b"FLVT" | u32 version=1 | u32 count
    count x ( u32 name_len | name utf-8 | u8 dtype (0 f32, 1 f64) | u8 rank | u32 dims[rank] | payload )
    u64 fnv1a(all preceding bytes)

The model structure is not stored as tensors; a ``__config__`` entry holds the
JSON-encoded config, form and seed as one byte per f32 element so the file stays
within the two tensor dtypes.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numba
import numpy as np

from .blocks import Form
from .errors import WeightFileError
from .model import ModelGraph, VariantConfig, build
from .tensor import dtype_name

MAGIC = b"FLVT"
VERSION = 1
CONFIG_KEY = "__config__"
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)


@numba.njit(cache=True)
def _fnv1a(data, h, prime):
    for b in data:
        h ^= numba.uint64(b)
        h *= prime
    return h


def fnv1a64(data: bytes) -> int:
    buf = np.frombuffer(data, dtype=np.uint8)
    return int(_fnv1a(buf, FNV_OFFSET, FNV_PRIME))


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise WeightFileError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 20 or data[:4] != MAGIC:
        raise WeightFileError("not a FLVT weight file (bad magic)")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if fnv1a64(body) != stored:
        raise WeightFileError("checksum mismatch: file is corrupt or truncated")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    off, out = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            name = body[off + 4:off + 4 + n].decode("utf-8")
            off += 4 + n
            code, rank = struct.unpack_from("<BB", body, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            dt = _DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + size > len(body):
                raise WeightFileError(f"{name}: payload runs past end of file")
            out[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=off).reshape(dims).copy()
            off += size
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise WeightFileError(f"malformed tensor table: {e}") from e
    if off != len(body):
        raise WeightFileError("trailing bytes after tensor table")
    return out


def _config_blob(g: ModelGraph) -> np.ndarray:
    meta = {"config": dataclasses.asdict(g.config), "form": g.form.value, "seed": g.seed,
            "dtype": dtype_name(g.dtype)}
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8).astype(np.float32)


def _parse_config(blob: np.ndarray) -> dict:
    try:
        meta = json.loads(blob.astype(np.uint8).tobytes().decode())
        cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()}
        meta["config"] = VariantConfig(**cfg).validate()
    except (ValueError, KeyError, TypeError) as e:
        raise WeightFileError(f"bad {CONFIG_KEY} record: {e}") from e
    return meta


def dumps(g: ModelGraph) -> bytes:
    tensors = {CONFIG_KEY: _config_blob(g)}
    tensors.update(g.weights())
    return encode_tensors(tensors)


def loads(data: bytes) -> ModelGraph:
    tensors = decode_tensors(data)
    if CONFIG_KEY not in tensors:
        raise WeightFileError(f"missing {CONFIG_KEY} record")
    meta = _parse_config(tensors.pop(CONFIG_KEY))
    g = build(meta["config"], seed=meta["seed"], dtype=meta["dtype"])
    if meta["form"] == Form.DEPLOY.value:
        from .reparam import fuse_weights
        g = fuse_weights(g)
    try:
        return g.with_weights(tensors)
    except ValueError as e:
        raise WeightFileError(str(e)) from e


def save(g: ModelGraph, path) -> int:
    data = dumps(g)
    Path(path).write_bytes(data)
    return len(data)


def load(path) -> ModelGraph:
    return loads(Path(path).read_bytes())


def graphs_equal(a: ModelGraph, b: ModelGraph) -> bool:
    """Bitwise equality of structure and every weight."""
    if a.config != b.config or a.form != b.form or np.dtype(a.dtype) != np.dtype(b.dtype):
        return False
    wa, wb = a.weights(), b.weights()
    if list(wa) != list(wb):
        return False
    return all(x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes()
               for x, y in zip(wa.values(), wb.values()))
