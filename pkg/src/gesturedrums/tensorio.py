"""Versioned binary tensor container used for codec and model checkpoints.

Layout (all little-endian):
    magic[4] | u32 version | u32 json_len | config json (utf-8)
    | u32 n_tensors | tensor records
Each tensor record:
    u16 name_len | name utf-8 | u8 dtype (0=f32, 1=i64) | u8 ndim
    | u32 dims[ndim] | raw values
"""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

from .errors import ContainerError

VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<i8"): 1}


def pack_container(magic: bytes, config: dict, tensors: dict) -> bytes:
    """Serialize config + named tensors to bytes."""
    if len(magic) != 4:
        raise ContainerError(f"magic must be 4 bytes, got {magic!r}")
    buf = io.BytesIO()
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(magic)
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f4")
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8")
        else:
            raise ContainerError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def unpack_container(data: bytes, expect_magic: bytes):
    """Parse bytes back to (config, {name: array}). Raises ContainerError on
    any structural problem."""
    try:
        if data[:4] != expect_magic:
            raise ContainerError(f"bad magic {data[:4]!r}, expected {expect_magic!r}")
        off = 4
        version, json_len = struct.unpack_from("<II", data, off)
        off += 8
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        config = json.loads(data[off : off + json_len].decode("utf-8"))
        off += json_len
        (n_tensors,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode("utf-8")
            off += name_len
            dtype_tag, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            dtype = _DTYPES.get(dtype_tag)
            if dtype is None:
                raise ContainerError(f"unknown dtype tag {dtype_tag} for tensor {name!r}")
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            raw = data[off : off + nbytes]
            if len(raw) != nbytes:
                raise ContainerError(f"tensor {name!r} truncated")
            off += nbytes
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        return config, tensors
    except (struct.error, IndexError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed container: {exc}") from exc


def write_container(path, magic: bytes, config: dict, tensors: dict) -> None:
    data = pack_container(magic, config, tensors)
    with open(path, "wb") as fh:
        fh.write(data)


def read_container(path, expect_magic: bytes):
    with open(path, "rb") as fh:
        data = fh.read()
    return unpack_container(data, expect_magic)


def content_hash(magic: bytes, config: dict, tensors: dict) -> str:
    """Stable sha256 over the serialized container, used for provenance."""
    return hashlib.sha256(pack_container(magic, config, tensors)).hexdigest()
