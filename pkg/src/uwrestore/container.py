"""Binary container for named float tensors (MTTB format).

Byte layout, all integers little-endian:

    magic   4 bytes  b"MTTB"
    version u32      currently 1
    count   u32      number of entries
    entry   repeated count times:
        name_len u16
        name     name_len bytes, UTF-8
        dtype    u8   0 = float32, 1 = float64
        ndim     u8
        dims     ndim x u64
        payload  prod(dims) * itemsize bytes, little-endian, row-major

Writing preserves entry order, so serializing the same dict twice yields
byte-identical files.  Round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ImageIOError

MAGIC = b"MTTB"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {"f4": 0, "f8": 1}


def write_tensors(path, tensors):
    """Write an ordered mapping of name -> ndarray (f32/f64) to ``path``."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float32:
            code = 0
        elif arr.dtype == np.float64:
            code = 1
        else:
            raise ImageIOError(f"{path}: unsupported dtype {arr.dtype} for entry '{name}'")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ImageIOError(f"{path}: entry name too long ({len(raw_name)} bytes)")
        blob += struct.pack("<H", len(raw_name))
        blob += raw_name
        blob += struct.pack("<BB", code, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def read_tensors(path):
    """Read a container back into a dict of name -> ndarray, preserving order."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc.strerror or exc}") from exc

    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise ImageIOError(f"{path}: truncated file while reading {what}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise ImageIOError(f"{path}: bad magic, not a tensor container")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ImageIOError(f"{path}: unsupported container version {version}")

    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, "entry header"))
        if code not in _DTYPE_CODES:
            raise ImageIOError(f"{path}: unknown dtype code {code} for entry '{name}'")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims"))
        dtype = _DTYPE_CODES[code]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        payload = take(n_bytes, f"payload of '{name}'")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
        out[name] = arr
    if pos != len(view):
        raise ImageIOError(f"{path}: {len(view) - pos} trailing bytes after last entry")
    return out
