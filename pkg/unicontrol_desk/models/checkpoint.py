"""
Checkpoint - Named-tensor checkpoint files
Layout (all integers little-endian):

    "UCKP" | version u32 | manifest length u64 | manifest | payload | crc32 u32

The manifest is UTF-8 text, one line per entry. Metadata lines start with
"#" and carry a JSON value ("#step", "#config", "#rng", "#frozen"); tensor
lines read "name<TAB>f32<TAB>rank<TAB>extents...<TAB>offset" with offsets
relative to the payload start. The CRC covers the payload only.
"""

import json
import logging
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from unicontrol_desk.models.errors import DatasetError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b"UCKP"
VERSION = 1
DTYPE_TAG = "f32"
METADATA_KEYS: Tuple[str, ...] = ("step", "config", "rng", "frozen")

_PREAMBLE = struct.Struct("<4sIQ")
_CRC = struct.Struct("<I")

PathLike = Union[str, Path]


def _dump_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


@dataclass(eq=False)
class Checkpoint:
    """
    Model parameters plus everything needed to rebuild and resume.

    Attributes:
        tensors: Ordered name -> float32 array
        step: Optimizer steps taken
        config: Config snapshot (plain JSON-able dict)
        rng: Training RNG state (numpy bit-generator state dict)
        frozen: Names excluded from optimization when the file was written
        version: Format version
    """

    tensors: "OrderedDict[str, np.ndarray]"
    step: int = 0
    config: Dict[str, Any] = field(default_factory=dict)
    rng: Dict[str, Any] = field(default_factory=dict)
    frozen: Tuple[str, ...] = ()
    version: int = VERSION

    def layout(self) -> List[Tuple[str, int, int]]:
        """(name, payload offset, byte length) per tensor in file order."""
        rows = []
        offset = 0
        for name, array in self.tensors.items():
            size = 4 * int(array.size)
            rows.append((name, offset, size))
            offset += size
        return rows

    def to_bytes(self) -> bytes:
        lines = [
            f"#step\t{_dump_json(int(self.step))}",
            f"#config\t{_dump_json(self.config)}",
            f"#rng\t{_dump_json(self.rng)}",
            f"#frozen\t{_dump_json(sorted(self.frozen))}",
        ]
        chunks = []
        for name, offset, _ in self.layout():
            array = np.asarray(self.tensors[name], dtype="<f4", order="C")
            fields = [name, DTYPE_TAG, str(array.ndim)] + [str(e) for e in array.shape] + [str(offset)]
            lines.append("\t".join(fields))
            chunks.append(array.tobytes())
        manifest = ("\n".join(lines) + "\n").encode("utf-8")
        payload = b"".join(chunks)
        return b"".join(
            [
                _PREAMBLE.pack(MAGIC, self.version, len(manifest)),
                manifest,
                payload,
                _CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF),
            ]
        )

    @classmethod
    def from_bytes(cls, buffer: bytes) -> "Checkpoint":
        """
        Parse and validate a checkpoint.

        Raises:
            FormatError: bad magic, version, manifest, layout or CRC; the
                message names the byte offset where validation failed
        """
        if len(buffer) < _PREAMBLE.size:
            raise FormatError("file shorter than checkpoint header", 0)
        magic, version, manifest_len = _PREAMBLE.unpack_from(buffer, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", 4)
        start = _PREAMBLE.size
        if start + manifest_len + _CRC.size > len(buffer):
            raise FormatError("truncated manifest", start)
        try:
            manifest = buffer[start : start + manifest_len].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("manifest is not UTF-8", start) from None

        payload_start = start + manifest_len
        payload_end = len(buffer) - _CRC.size
        payload = buffer[payload_start:payload_end]
        meta, entries = _parse_manifest(manifest, start)

        expected = 0
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, shape, offset, line_offset in entries:
            if offset != expected:
                raise FormatError(f"tensor {name!r} offset {offset}, expected {expected}", line_offset)
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            if offset + 4 * count > len(payload):
                raise FormatError(f"truncated payload for {name!r}", payload_start + offset)
            tensors[name] = (
                np.frombuffer(payload, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)
            )
            expected = offset + 4 * count
        if expected != len(payload):
            raise FormatError(f"{len(payload) - expected} unaccounted payload bytes", payload_start + expected)
        (crc,) = _CRC.unpack_from(buffer, payload_end)
        if crc != zlib.crc32(payload) & 0xFFFFFFFF:
            raise FormatError("payload CRC32 mismatch", payload_end)

        return cls(
            tensors=tensors,
            step=int(meta.get("step", 0)),
            config=dict(meta.get("config", {})),
            rng=dict(meta.get("rng", {})),
            frozen=tuple(meta.get("frozen", ())),
            version=version,
        )


TensorEntry = Tuple[str, Tuple[int, ...], int, int]


def _parse_manifest(text: str, base_offset: int) -> Tuple[Dict[str, Any], List[TensorEntry]]:
    meta: Dict[str, Any] = {}
    entries: List[TensorEntry] = []
    position = base_offset
    for line in text.split("\n"):
        line_offset = position
        position += len(line.encode("utf-8")) + 1
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("\t")
            if key not in METADATA_KEYS:
                raise FormatError(f"unknown metadata key {key!r}", line_offset)
            try:
                meta[key] = json.loads(value)
            except json.JSONDecodeError:
                raise FormatError(f"metadata {key!r} is not JSON", line_offset) from None
            continue
        fields = line.split("\t")
        try:
            name, tag, rank_text = fields[0], fields[1], fields[2]
            rank = int(rank_text)
            if rank < 0 or len(fields) != 4 + rank:
                raise ValueError
            shape = tuple(int(e) for e in fields[3 : 3 + rank])
            offset = int(fields[-1])
        except (IndexError, ValueError):
            raise FormatError(f"malformed manifest line {line!r}", line_offset) from None
        if tag != DTYPE_TAG:
            raise FormatError(f"unsupported dtype {tag!r} for {name!r}", line_offset)
        if any(e < 0 for e in shape) or offset < 0:
            raise FormatError(f"negative extent or offset for {name!r}", line_offset)
        entries.append((name, shape, offset, line_offset))
    return meta, entries


def save_checkpoint(path: PathLike, checkpoint: Checkpoint) -> None:
    data = checkpoint.to_bytes()
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise DatasetError(f"cannot write checkpoint ({exc.strerror})", path) from exc
    logger.info("wrote checkpoint %s (%d tensors, step %d)", path, len(checkpoint.tensors), checkpoint.step)


def load_checkpoint(path: PathLike) -> Checkpoint:
    try:
        buffer = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read checkpoint ({exc.strerror})", path) from exc
    return Checkpoint.from_bytes(buffer)


def checkpoint_from_arrays(
    arrays: Mapping[str, np.ndarray],
    step: int = 0,
    config: Optional[Mapping[str, Any]] = None,
    rng: Optional[Mapping[str, Any]] = None,
    frozen: Tuple[str, ...] = (),
) -> Checkpoint:
    """Snapshot arrays (copied to float32) into a Checkpoint."""
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict(
        (name, np.array(array, dtype=np.float32, copy=True)) for name, array in arrays.items()
    )
    return Checkpoint(
        tensors=tensors,
        step=int(step),
        config=dict(config or {}),
        rng=dict(rng or {}),
        frozen=tuple(sorted(frozen)),
    )
