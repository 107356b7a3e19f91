"""float32 tensors and the HRST binary container.

HRST layout: the four bytes ``HRST``, a little-endian u32 rank, ``rank``
little-endian u32 extents, then the row-major little-endian f32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HRST"


class TensorError(ValueError):
    pass


def as_tensor(data, dims=None) -> np.ndarray:
    """Validate and convert to a C-contiguous float32 array."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if int(np.prod(dims)) != arr.size:
            raise TensorError(f"{arr.size} values do not fill dims {dims}")
        arr = arr.reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise TensorError("tensor contains non-finite values")
    return arr


def encode_hrst(tensor: np.ndarray) -> bytes:
    arr = as_tensor(tensor)
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.astype("<f4", copy=False).tobytes(order="C")


def decode_hrst(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise TensorError("not an HRST blob (bad magic)")
    if len(blob) < 8:
        raise TensorError("truncated HRST header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    end = 8 + 4 * rank
    if len(blob) < end:
        raise TensorError("truncated HRST header")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(dims)) if rank else 1
    if len(blob) - end != 4 * count:
        raise TensorError(f"payload has {len(blob) - end} bytes, expected {4 * count}")
    arr = np.frombuffer(blob, dtype="<f4", offset=end, count=count)
    return as_tensor(arr.astype(np.float32), dims)


def write_hrst(path: str | Path, tensor: np.ndarray) -> None:
    Path(path).write_bytes(encode_hrst(tensor))


def read_hrst(path: str | Path) -> np.ndarray:
    return decode_hrst(Path(path).read_bytes())
