"""Binary tensor container.

Layout (all integers little-endian)::

    b"CART" | version u8 (=1) | dtype u8 (0: float32, 1: float64) | rank u8 | pad u8 (=0)
    dims: rank x u32
    payload: row-major values
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import ContractError

MAGIC = b"CART"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {"f32": 0, "f64": 1}


class TensorFormatError(ContractError):
    pass


def encode(arr, dtype: str = "f64") -> bytes:
    if dtype not in CODES:
        raise ContractError(f"dtype must be one of {sorted(CODES)}")
    a = np.asarray(arr)
    if a.ndim > 255:
        raise ContractError("rank above 255 cannot be stored")
    if any(d > 0xFFFFFFFF for d in a.shape):
        raise ContractError("dimension does not fit in 32 bits")
    code = CODES[dtype]
    head = MAGIC + struct.pack("<BBBB", VERSION, code, a.ndim, 0) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise TensorFormatError("bad magic")
    version, code, rank, pad = struct.unpack_from("<BBBB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if pad != 0:
        raise TensorFormatError("nonzero pad byte")
    off = 8 + 4 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    dt = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != expected:
        raise TensorFormatError(f"payload is {len(buf) - off} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(dims).copy()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write through a temporary file in the same directory, then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, arr, dtype: str = "f64") -> None:
    atomic_write_bytes(path, encode(arr, dtype))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def read_header(path) -> tuple[str, tuple[int, ...]]:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != MAGIC:
            raise TensorFormatError("bad magic")
        rank = head[6]
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    code = head[5]
    return {v: k for k, v in CODES.items()}.get(code, "?"), dims
