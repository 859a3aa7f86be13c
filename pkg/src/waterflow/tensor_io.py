"""WFT1 tensor container: the on-disk format for feature maps and checkpoints.

Layout (little-endian throughout):
    bytes 0-3   magic ``WFT1``
    byte  4     dtype code: 0 = float32, 1 = float64
    byte  5     rank (1..4)
    next        rank u32 extents
    payload     row-major values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import PipelineIOError, ShapeError

MAGIC = b"WFT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def tensor_to_bytes(x: np.ndarray) -> bytes:
    x = np.ascontiguousarray(x)
    if x.dtype not in _CODES:
        if x.dtype.kind == "f":
            x = x.astype(np.float32)
        else:
            x = x.astype(np.float64)
    if not 1 <= x.ndim <= 4:
        raise ShapeError(f"WFT1 stores rank 1..4 tensors, got rank {x.ndim}")
    header = MAGIC + struct.pack("<BB", _CODES[x.dtype], x.ndim)
    header += struct.pack(f"<{x.ndim}I", *x.shape)
    return header + x.astype(x.dtype.newbyteorder("<")).tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise PipelineIOError("not a WFT1 blob (bad magic)")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _DTYPES:
        raise PipelineIOError(f"unknown WFT1 dtype code {code}")
    if not 1 <= rank <= 4:
        raise PipelineIOError(f"invalid WFT1 rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    offset = 6 + 4 * rank
    dtype = _DTYPES[code]
    count = int(np.prod(dims))
    expected = offset + count * dtype.itemsize
    if len(blob) != expected:
        raise PipelineIOError(f"WFT1 payload size mismatch: {len(blob)} != {expected}")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def blob_size(buf: bytes, offset: int = 0) -> int:
    """Total byte length of the WFT1 blob starting at `offset` in `buf`."""
    if len(buf) < offset + 6 or buf[offset : offset + 4] != MAGIC:
        raise PipelineIOError("not a WFT1 blob (bad magic)")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _DTYPES or not 1 <= rank <= 4:
        raise PipelineIOError("corrupt WFT1 header")
    if len(buf) < offset + 6 + 4 * rank:
        raise PipelineIOError("truncated WFT1 header")
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 6)
    return 6 + 4 * rank + int(np.prod(dims)) * _DTYPES[code].itemsize


def write_tensor(path, x: np.ndarray) -> None:
    try:
        Path(path).write_bytes(tensor_to_bytes(x))
    except OSError as exc:
        raise PipelineIOError(f"cannot write tensor to {path}: {exc}") from exc


def read_tensor(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise PipelineIOError(f"cannot read tensor from {path}: {exc}") from exc
    return tensor_from_bytes(blob)
