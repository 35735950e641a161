"""Binary tensor file format shared by datasets and checkpoints.

Layout, all integers little-endian::

    b"TIDE"            magic, 4 bytes
    u8                 version (1)
    u8                 dtype code (0 = float32, 1 = uint8)
    u8                 rank
    rank x u32         dims
    payload            row-major elements
"""

import struct
from pathlib import Path

import crc32c
import numpy as np
import torch

from .datatypes import IntegrityError

MAGIC = b"TIDE"
VERSION = 1

_DTYPES: dict[int, np.dtype] = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


def encode_tensor(array: np.ndarray | torch.Tensor) -> bytes:
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    array = np.asarray(array)
    code = _CODES.get(array.dtype)
    if code is None:
        raise ValueError(f"Unsupported tensor dtype {array.dtype}, expected float32 or uint8")
    if array.ndim > 255:
        raise ValueError(f"Tensor rank {array.ndim} exceeds 255")
    header = MAGIC + struct.pack("<BBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes(order="C")
    return header + payload


def decode_tensor(data: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(data) < 7 or data[:4] != MAGIC:
        raise IntegrityError(f"{name}: not a tensor file (bad magic)")
    version, code, rank = struct.unpack_from("<BBB", data, 4)
    if version != VERSION:
        raise IntegrityError(f"{name}: unsupported tensor file version {version}")
    if code not in _DTYPES:
        raise IntegrityError(f"{name}: unknown dtype code {code}")
    offset = 7 + 4 * rank
    if len(data) < offset:
        raise IntegrityError(f"{name}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", data, 7)
    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - offset != expected:
        raise IntegrityError(
            f"{name}: payload has {len(data) - offset} bytes, expected {expected}"
        )
    array = np.frombuffer(data, dtype=dtype, offset=offset).reshape(shape)
    return array.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path: str | Path, array: np.ndarray | torch.Tensor) -> int:
    """Write `array` to `path` and return the crc32c of the written bytes."""
    data = encode_tensor(array)
    Path(path).write_bytes(data)
    return crc32c.crc32c(data)


def read_tensor(path: str | Path, checksum: int | None = None) -> np.ndarray:
    """Read a tensor file, verifying its crc32c when `checksum` is given."""
    path = Path(path)
    if not path.is_file():
        raise IntegrityError(f"Missing tensor file {path}")
    data = path.read_bytes()
    if checksum is not None and crc32c.crc32c(data) != checksum:
        raise IntegrityError(f"{path}: checksum mismatch")
    return decode_tensor(data, str(path))
