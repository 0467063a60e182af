"""
Records - Binary codecs for dataset records and raw tensor files
All integers and reals are little-endian; tensors are stored as
(rank u32, extents u32[rank], float32[product(extents)]).
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar, Tuple, Union

import numpy as np

from unicontrol_desk.models.errors import DatasetError, FormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_U32: struct.Struct = struct.Struct("<I")
_HEADER: struct.Struct = struct.Struct("<4sI")


def encode_tensor(array: np.ndarray) -> bytes:
    """Serialize an array as rank, extents and float32 payload."""
    data = np.asarray(array, dtype="<f4", order="C")
    head = _U32.pack(data.ndim) + b"".join(_U32.pack(extent) for extent in data.shape)
    return head + data.tobytes()


def decode_tensor(buffer: bytes, offset: int) -> Tuple[np.ndarray, int]:
    """
    Read one tensor starting at ``offset``.

    Returns:
        (array, offset just past the tensor)

    Raises:
        FormatError: buffer ends before the tensor does
    """
    rank, offset = _read_u32(buffer, offset, "tensor rank")
    extents = []
    for _ in range(rank):
        extent, offset = _read_u32(buffer, offset, "tensor extent")
        extents.append(extent)
    count = int(np.prod(extents, dtype=np.int64)) if extents else 1
    end = offset + 4 * count
    if end > len(buffer):
        raise FormatError("truncated tensor payload", offset)
    array = np.frombuffer(buffer, dtype="<f4", count=count, offset=offset).astype(np.float32)
    return array.reshape(extents), end


def _read_u32(buffer: bytes, offset: int, what: str) -> Tuple[int, int]:
    if offset + _U32.size > len(buffer):
        raise FormatError(f"truncated {what}", offset)
    return _U32.unpack_from(buffer, offset)[0], offset + _U32.size


def _read_string(buffer: bytes, offset: int, what: str) -> Tuple[str, int]:
    length, offset = _read_u32(buffer, offset, f"{what} length")
    if offset + length > len(buffer):
        raise FormatError(f"truncated {what}", offset)
    try:
        text = buffer[offset : offset + length].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{what} is not UTF-8", offset) from None
    return text, offset + length


def _check_header(buffer: bytes, magic: bytes, version: int) -> int:
    if len(buffer) < _HEADER.size:
        raise FormatError("file shorter than header", 0)
    found, found_version = _HEADER.unpack_from(buffer, 0)
    if found != magic:
        raise FormatError(f"bad magic {found!r}, expected {magic!r}", 0)
    if found_version != version:
        raise FormatError(f"unsupported version {found_version}", 4)
    return _HEADER.size


@dataclass(frozen=True)
class SampleRecord:
    """One (prompt, task, image, condition) training triplet on disk."""

    MAGIC: ClassVar[bytes] = b"UCDS"
    VERSION: ClassVar[int] = 1

    prompt: str
    task: str
    image: np.ndarray
    condition: np.ndarray

    def to_bytes(self) -> bytes:
        prompt = self.prompt.encode("utf-8")
        task = self.task.encode("utf-8")
        return b"".join(
            [
                _HEADER.pack(self.MAGIC, self.VERSION),
                _U32.pack(len(prompt)),
                prompt,
                _U32.pack(len(task)),
                task,
                encode_tensor(self.image),
                encode_tensor(self.condition),
            ]
        )

    @classmethod
    def from_bytes(cls, buffer: bytes) -> "SampleRecord":
        offset = _check_header(buffer, cls.MAGIC, cls.VERSION)
        prompt, offset = _read_string(buffer, offset, "prompt")
        task, offset = _read_string(buffer, offset, "task key")
        image, offset = decode_tensor(buffer, offset)
        condition, offset = decode_tensor(buffer, offset)
        if offset != len(buffer):
            raise FormatError("trailing bytes after record", offset)
        return cls(prompt=prompt, task=task, image=image, condition=condition)


TENSOR_MAGIC = b"UCTN"
TENSOR_VERSION = 1


def save_tensor(path: PathLike, array: np.ndarray) -> None:
    """Write a raw tensor file (bit-exact float32)."""
    try:
        Path(path).write_bytes(_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION) + encode_tensor(array))
    except OSError as exc:
        raise DatasetError(f"cannot write tensor ({exc.strerror})", path) from exc


def load_tensor(path: PathLike) -> np.ndarray:
    """Read a raw tensor file written by :func:`save_tensor`."""
    try:
        buffer = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read tensor ({exc.strerror})", path) from exc
    offset = _check_header(buffer, TENSOR_MAGIC, TENSOR_VERSION)
    array, end = decode_tensor(buffer, offset)
    if end != len(buffer):
        raise FormatError("trailing bytes after tensor", end)
    return array
