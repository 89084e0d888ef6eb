"""Tensor file format.

Layout: magic ``b"EXPT"``, u32 format version, u32 rank, one u64 per extent,
then the values as little-endian float32 in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"EXPT"
VERSION = 1


class TensorFileError(ValueError):
    pass


def tensor_to_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim == 0:
        array = array.reshape(1)
    header = MAGIC + struct.pack("<II", VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def tensor_from_bytes(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise TensorFileError(f"{name}: bad magic, not a tensor file")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise TensorFileError(f"{name}: unsupported format version {version}")
    offset = 12 + 8 * rank
    if len(blob) < offset:
        raise TensorFileError(f"{name}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", blob, 12)
    count = int(np.prod(shape)) if rank else 1
    if len(blob) != offset + 4 * count:
        raise TensorFileError(
            f"{name}: expected {count} values for shape {shape}, file holds {(len(blob) - offset) // 4}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=offset, count=count)
    return values.reshape(shape).astype(np.float32)


def save_tensor(path: Union[str, Path], array: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(array))


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise TensorFileError(f"{path}: missing tensor file")
    return tensor_from_bytes(path.read_bytes(), name=str(path))
