"""Binary container for precomputed embeddings, heatmaps and attention maps.

Layout (all little-endian)::

    magic   4 bytes  b"TCPF"
    version u16      1
    kind    u8       0 = text rows (K_s, C), 1 = image grid (h, w, C), 2 = generic
    dtype   u8       1 = float32
    rank    u32
    shape   rank x u32
    data    prod(shape) x float32, row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TCPF"
VERSION = 1
KIND_TEXT, KIND_IMAGE, KIND_GENERIC = 0, 1, 2
_DTYPES = {1: np.dtype("<f4")}


class TensorFileError(ValueError):
    pass


def write_tensor(path: str | Path, array, kind: int = KIND_GENERIC) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = MAGIC + struct.pack("<HBBI", VERSION, kind, 1, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor(path: str | Path, expected_kind: int | None = None) -> tuple[int, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise TensorFileError(f"{path}: not a tensor container")
    version, kind, dtype_code, rank = struct.unpack_from("<HBBI", raw, 4)
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported version {version}")
    if dtype_code not in _DTYPES:
        raise TensorFileError(f"{path}: unsupported dtype code {dtype_code}")
    if expected_kind is not None and kind != expected_kind:
        raise TensorFileError(f"{path}: expected kind {expected_kind}, found {kind}")
    offset = 12 + 4 * rank
    if len(raw) < offset:
        raise TensorFileError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, 12)
    dtype = _DTYPES[dtype_code]
    count = (len(raw) - offset) // dtype.itemsize
    if count != int(np.prod(shape)) or (len(raw) - offset) % dtype.itemsize:
        raise TensorFileError(
            f"{path}: shape mismatch, header declares {tuple(shape)} "
            f"({int(np.prod(shape))} values) but file holds {count}")
    data = np.frombuffer(raw, dtype=dtype, offset=offset).reshape(shape)
    return kind, data.astype(np.float32)
