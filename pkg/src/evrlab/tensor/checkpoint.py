"""Binary checkpoint files.

Byte layout (all integers little-endian)::

    magic      8 bytes   b"EVRCKPT\\x00"
    version    u32       currently 1
    meta_len   u32       length of the UTF-8 JSON metadata blob
    meta       meta_len bytes
    count      u32       number of arrays
    per array:
      name_len u16, name (UTF-8)
      dtype    u8        1 = float32, 2 = float64, 3 = int64
      ndim     u8, then ndim x u32 extents
      data     product(extents) * itemsize bytes, little-endian, C order
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"EVRCKPT\x00"
VERSION = 1
_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    out = bytearray(MAGIC)
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    out += struct.pack("<II", VERSION, len(blob)) + blob
    out += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", _CODES[dt], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=dt).tobytes()
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8
    try:
        version, meta_len = struct.unpack_from("<II", buf, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
        meta = json.loads(buf[pos:pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode()
            pos += n
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated at byte {pos}")
            arrays[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint near byte {pos}: {exc}") from None
    return arrays, meta


def save_module(path, module, meta: dict | None = None, store=None) -> None:
    arrays = OrderedDict(module.state_dict())
    if store is not None:
        arrays.update(("opt:" + k, v) for k, v in store.slot_arrays().items())
    write_checkpoint(path, arrays, meta)


def load_module(path, module, store=None) -> dict:
    arrays, meta = read_checkpoint(path)
    model_state = {k: v for k, v in arrays.items() if not k.startswith("opt:")}
    module.load_state_dict(model_state)
    if store is not None:
        store.load_slot_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("opt:")})
    return meta
