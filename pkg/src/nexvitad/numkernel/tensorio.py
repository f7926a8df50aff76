"""NXT1 tensor files: ``b"NXT1"``, u8 rank, rank x u32 LE dims, f32 LE data."""

import struct

import numpy as np

from ..errors import DataError

MAGIC = b"NXT1"


def tensor_to_bytes(x):
    x = np.asarray(x)
    if x.ndim > 255:
        raise DataError(f"rank {x.ndim} does not fit in a u8")
    head = MAGIC + struct.pack("<B", x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    return head + np.ascontiguousarray(x, dtype="<f4").tobytes()


def tensor_from_bytes(buf):
    if buf[:4] != MAGIC:
        raise DataError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    rank = buf[4]
    dims = struct.unpack_from(f"<{rank}I", buf, 5)
    offset = 5 + 4 * rank
    n = int(np.prod(dims, dtype=np.int64))
    if len(buf) - offset != 4 * n:
        raise DataError(f"payload has {len(buf) - offset} bytes, dims {dims} need {4 * n}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(dims).astype(np.float32)


def save_tensor(path, x):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(x))


def load_tensor(path):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
