"""Binary persistence: tensor records, checkpoints, and sample files.

One codec serves every on-disk artifact. A tensor record is

    u16 name length | UTF-8 name | u8 dtype (0=f32, 1=f64) | u8 rank |
    rank x u32 dims | little-endian C-order payload

A checkpoint is a 16-byte header (magic ``ADML``, u32 version, u32
episode index, u32 tensor count), the tensor records, and a u32
length-prefixed UTF-8 configuration echo. A sample file is a single
tensor record with an empty name. All integers are little-endian.
Writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, FormatError
from .models import ParamSet

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "Checkpoint",
    "tensor_record_nbytes",
    "checkpoint_nbytes",
    "save_checkpoint",
    "load_checkpoint",
    "save_sample",
    "load_sample",
    "atomic_write_bytes",
]

MAGIC = b"ADML"
FORMAT_VERSION = 1

_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass(frozen=True)
class Checkpoint:
    """A deserialized checkpoint: trained parameters plus provenance."""

    version: int
    episode: int
    params: ParamSet
    config_echo: str


def tensor_record_nbytes(name: str, shape: tuple[int, ...], dtype) -> int:
    """Exact on-disk size of one tensor record."""
    itemsize = np.dtype(dtype).itemsize
    payload = itemsize * int(np.prod(shape, dtype=np.int64)) if shape else itemsize
    return 2 + len(name.encode("utf-8")) + 1 + 1 + 4 * len(shape) + payload


def checkpoint_nbytes(params: ParamSet, config_echo: str) -> int:
    """Exact on-disk size of a checkpoint holding ``params``."""
    total = 16
    for name, t in params.items():
        total += tensor_record_nbytes(name, t.shape, t.data.dtype)
    return total + 4 + len(config_echo.encode("utf-8"))


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _write_tensor_record(f, name: str, arr: np.ndarray) -> None:
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise ContractError(f"unsupported tensor dtype {arr.dtype}")
    name_b = name.encode("utf-8")
    if len(name_b) > 0xFFFF:
        raise ContractError("tensor name too long")
    if arr.ndim > 0xFF:
        raise ContractError("tensor rank too large")
    f.write(struct.pack("<H", len(name_b)))
    f.write(name_b)
    f.write(struct.pack("<BB", code, arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    little = arr.astype(_CODE_TO_DTYPE[code], copy=False)
    f.write(np.ascontiguousarray(little).tobytes())


def _read_tensor_record(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, name_len).decode("utf-8")
    code, rank = struct.unpack("<BB", _read_exact(f, 2))
    dtype = _CODE_TO_DTYPE.get(code)
    if dtype is None:
        raise FormatError(f"unknown dtype code {code}")
    shape = tuple(
        struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(rank)
    )
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = _read_exact(f, dtype.itemsize * count)
    arr = np.frombuffer(payload, dtype=dtype, count=count).reshape(shape)
    return name, arr.astype(arr.dtype.newbyteorder("="), copy=True)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write a file via temp-then-rename so readers never see partial output."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params: ParamSet, episode: int, config_echo: str = "") -> None:
    """Persist a ParamSet bit-exactly. ``config_echo`` travels along verbatim."""
    import io

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", FORMAT_VERSION, episode, len(params)))
    for name, t in params.items():
        _write_tensor_record(buf, name, t.data)
    echo_b = config_echo.encode("utf-8")
    buf.write(struct.pack("<I", len(echo_b)))
    buf.write(echo_b)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint back; raises FormatError on any structural damage."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, episode, count = struct.unpack("<III", _read_exact(f, 12))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}")
        items = []
        for _ in range(count):
            name, arr = _read_tensor_record(f)
            items.append((name, Tensor(arr, requires_grad=True)))
        (echo_len,) = struct.unpack("<I", _read_exact(f, 4))
        echo = _read_exact(f, echo_len).decode("utf-8")
        if f.read(1):
            raise FormatError("trailing bytes after checkpoint")
    return Checkpoint(version=version, episode=episode, params=ParamSet(items), config_echo=echo)


def save_sample(path, arr: np.ndarray) -> None:
    """Write one raw sample tensor (a single anonymous record)."""
    import io

    buf = io.BytesIO()
    _write_tensor_record(buf, "", np.asarray(arr))
    atomic_write_bytes(path, buf.getvalue())


def load_sample(path) -> np.ndarray:
    with open(path, "rb") as f:
        _, arr = _read_tensor_record(f)
        if f.read(1):
            raise FormatError("trailing bytes after sample record")
    return arr
