"""Binary container for dense float32 tensors.

Layout::

    b"MERVFTR1" | u8 dtype code (1 = f32) | u8 rank | rank x u32 LE extents | f32 LE payload

Payload is row-major with the innermost axis last.
"""
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"MERVFTR1"
DTYPE_F32 = 1


def dumps(arr):
    arr = np.asarray(arr)
    if arr.dtype != np.float32:
        if not np.issubdtype(arr.dtype, np.floating):
            raise FormatError(f"only float tensors can be stored, got {arr.dtype}")
        arr = arr.astype(np.float32)
    if arr.ndim == 0 or arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} cannot be stored")
    header = MAGIC + struct.pack("<BB", DTYPE_F32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def loads(buf):
    buf = bytes(buf)
    if len(buf) < len(MAGIC) + 2:
        raise FormatError("truncated header")
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {buf[:len(MAGIC)]!r}")
    code, rank = struct.unpack_from("<BB", buf, len(MAGIC))
    if code != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {code}")
    if rank == 0:
        raise FormatError("rank 0 is not a valid tensor")
    off = len(MAGIC) + 2
    if len(buf) < off + 4 * rank:
        raise FormatError("truncated extents")
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    if any(s == 0 for s in shape):
        raise FormatError(f"zero extent in {shape}")
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    payload = buf[off:]
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, shape {shape} needs {expected}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def write_feature(path, arr):
    with open(path, "wb") as fh:
        fh.write(dumps(arr))


def read_feature(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
