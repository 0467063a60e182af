"""
Tasks - Task registry, instruction encoder, and task-weight estimation
Holds the nine condition-to-image tasks, the deterministic hashed
bag-of-tokens text encoder, zero-shot weight estimation and hybrid-task
composition.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from unicontrol_desk.models.errors import FormatError, ShapeError, UnknownTaskError
from unicontrol_desk.models.rng import TWO_POW_MINUS_53, SplitMix64

logger = logging.getLogger(__name__)

EMBED_DIM = 64
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class TaskSpec:
    """A condition-to-image task and the fixed instruction that names it."""

    key: str
    instruction: str
    adapter_index: int
    condition_name: str
    channels: int = 3

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "instruction": self.instruction,
            "adapter_index": self.adapter_index,
            "condition_name": self.condition_name,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaskSpec":
        return cls(
            key=data["key"],
            instruction=data["instruction"],
            adapter_index=int(data["adapter_index"]),
            condition_name=data["condition_name"],
            channels=int(data.get("channels", 3)),
        )


DEFAULT_TASKS: Tuple[TaskSpec, ...] = (
    TaskSpec("hed", "hed edge to image", 0, "hed edge"),
    TaskSpec("canny", "canny edge to image", 1, "canny edge"),
    TaskSpec("seg", "segmentation map to image", 2, "segmentation map"),
    TaskSpec("depth", "depth map to image", 3, "depth map"),
    TaskSpec("normal", "normal surface map to image", 4, "normal surface map"),
    TaskSpec("pose", "human pose skeleton to image", 5, "human skeleton"),
    TaskSpec("hedsketch", "sketch to image", 6, "sketch"),
    TaskSpec("bbox", "bounding box to image", 7, "bounding box"),
    TaskSpec("outpainting", "image outpainting", 8, "masked image"),
)


class TaskRegistry:
    """
    Immutable key -> TaskSpec table.

    Keys and instructions are one-to-one; adapter indices are 0..K-1.
    """

    def __init__(self, specs: Sequence[TaskSpec] = DEFAULT_TASKS) -> None:
        self._specs: Dict[str, TaskSpec] = {}
        instructions = set()
        for spec in specs:
            if spec.key in self._specs or spec.instruction in instructions:
                raise ValueError(f"duplicate task entry: {spec.key!r}")
            self._specs[spec.key] = spec
            instructions.add(spec.instruction)
        if sorted(s.adapter_index for s in specs) != list(range(len(specs))):
            raise ValueError("adapter indices must cover 0..K-1")
        self._by_index = {spec.adapter_index: spec for spec in specs}
        self._embeddings: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self._specs)

    def __iter__(self) -> Iterator[TaskSpec]:
        return iter(sorted(self._specs.values(), key=lambda s: s.adapter_index))

    def __contains__(self, key: object) -> bool:
        return key in self._specs

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TaskRegistry) and list(self) == list(other)

    def __hash__(self) -> int:
        return hash(tuple(self))

    def keys(self) -> List[str]:
        return [spec.key for spec in self]

    def get(self, key: str) -> TaskSpec:
        try:
            return self._specs[key]
        except KeyError:
            raise UnknownTaskError(key) from None

    def by_index(self, index: int) -> TaskSpec:
        if index not in self._by_index:
            raise IndexError(f"adapter index {index} out of range 0..{len(self) - 1}")
        return self._by_index[index]

    def index_of(self, key: str) -> int:
        return self.get(key).adapter_index

    def instruction_for(self, key: str) -> str:
        return self.get(key).instruction

    def one_hot(self, key: str) -> np.ndarray:
        weights = np.zeros(len(self), dtype=np.float64)
        weights[self.index_of(key)] = 1.0
        return weights

    def instruction_embeddings(self) -> np.ndarray:
        """(K, 64) embeddings of every instruction, in adapter order."""
        if self._embeddings is None:
            self._embeddings = np.stack([encode_text(spec.instruction) for spec in self])
        return self._embeddings

    def to_json(self) -> str:
        return json.dumps([spec.to_dict() for spec in self], indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TaskRegistry":
        return cls([TaskSpec.from_dict(entry) for entry in json.loads(text)])


DEFAULT_REGISTRY = TaskRegistry()


def instruction_for(key: str) -> str:
    """
    Instruction string of a registered task.

    Raises:
        UnknownTaskError: key is not registered
    """
    return DEFAULT_REGISTRY.instruction_for(key)


# ----------------------------------------------------------------------
# Text encoder
# ----------------------------------------------------------------------


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def _token_vector(token: str) -> List[float]:
    stream = SplitMix64(fnv1a64(token.encode("utf-8")))
    values: List[float] = []
    for _ in range(EMBED_DIM // 2):
        u1 = 1.0 - (stream.next_u64() >> 11) * TWO_POW_MINUS_53
        u2 = (stream.next_u64() >> 11) * TWO_POW_MINUS_53
        radius = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        values.append(radius * math.cos(theta))
        values.append(radius * math.sin(theta))
    return values


def _norm(values: Sequence[float]) -> float:
    # Sequential sum keeps the result identical across builds.
    total = 0.0
    for v in values:
        total += v * v
    return math.sqrt(total)


def encode_text(text: str) -> np.ndarray:
    """
    Deterministic 64-d unit embedding of a string.

    Tokens are the lowercased whitespace-separated words. Each token's
    FNV-1a hash seeds a SplitMix64 stream whose Box-Muller draws form the
    token vector; normalized token vectors are averaged and the mean is
    renormalized. The empty string maps to the all-zero null embedding.

    Returns:
        float32 array of shape (64,)
    """
    tokens = text.lower().split()
    if not tokens:
        return np.zeros(EMBED_DIM, dtype=np.float32)
    acc = [0.0] * EMBED_DIM
    for token in tokens:
        vector = _token_vector(token)
        norm = _norm(vector)
        for i in range(EMBED_DIM):
            acc[i] += vector[i] / norm
    count = float(len(tokens))
    mean = [value / count for value in acc]
    norm = _norm(mean)
    if norm == 0.0:
        return np.zeros(EMBED_DIM, dtype=np.float32)
    return np.array([value / norm for value in mean], dtype=np.float64).astype(np.float32)


def null_embedding() -> np.ndarray:
    return np.zeros(EMBED_DIM, dtype=np.float32)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    denom = float(np.linalg.norm(a64) * np.linalg.norm(b64))
    return float(a64 @ b64) / denom if denom > 0 else 0.0


_GOLDEN_LEN = struct.Struct("<I")


def write_golden_embeddings(path: Union[str, Path], registry: TaskRegistry = DEFAULT_REGISTRY) -> None:
    """Write (key length u32, key bytes, 64 float32) records for every instruction."""
    chunks = []
    for spec in registry:
        key = spec.key.encode("utf-8")
        chunks.append(_GOLDEN_LEN.pack(len(key)) + key)
        chunks.append(encode_text(spec.instruction).astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_golden_embeddings(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read a golden embedding file into key -> float32 vector."""
    buffer = Path(path).read_bytes()
    out: Dict[str, np.ndarray] = {}
    offset = 0
    while offset < len(buffer):
        if offset + _GOLDEN_LEN.size > len(buffer):
            raise FormatError("truncated key length", offset)
        (length,) = _GOLDEN_LEN.unpack_from(buffer, offset)
        offset += _GOLDEN_LEN.size
        end = offset + length + 4 * EMBED_DIM
        if end > len(buffer):
            raise FormatError("truncated golden record", offset)
        key = buffer[offset : offset + length].decode("utf-8")
        offset += length
        out[key] = np.frombuffer(buffer, dtype="<f4", count=EMBED_DIM, offset=offset).astype(np.float32)
        offset = end
    return out


# ----------------------------------------------------------------------
# Conditioning inputs
# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConditionSource:
    """A condition image and the adapter weights that read it."""

    image: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True, eq=False)
class Conditioning:
    """
    Everything the control branch consumes besides x_t, t and the prompt.

    Adapter features are the mean over ``sources`` of each source's weighted
    adapter blend. No sources means the null condition: base model only.
    """

    sources: Tuple[ConditionSource, ...]
    instruction: np.ndarray
    label: str = ""

    @property
    def is_null(self) -> bool:
        return not self.sources

    @classmethod
    def null(cls) -> "Conditioning":
        return cls(sources=(), instruction=null_embedding(), label="")

    @classmethod
    def single(
        cls, task: str, image: np.ndarray, registry: TaskRegistry = DEFAULT_REGISTRY
    ) -> "Conditioning":
        spec = registry.get(task)
        return cls(
            sources=(ConditionSource(image, registry.one_hot(task)),),
            instruction=encode_text(spec.instruction),
            label=spec.instruction,
        )

    @classmethod
    def blended(
        cls, image: np.ndarray, weights: np.ndarray, instruction: str
    ) -> "Conditioning":
        return cls(
            sources=(ConditionSource(image, np.asarray(weights, dtype=np.float64)),),
            instruction=encode_text(instruction),
            label=instruction,
        )


# ----------------------------------------------------------------------
# Zero-shot and hybrid composition
# ----------------------------------------------------------------------

WeightSpec = Union[Mapping[str, float], Sequence[float], np.ndarray]


def _manual_weights(weights: WeightSpec, registry: TaskRegistry) -> np.ndarray:
    vector = np.zeros(len(registry), dtype=np.float64)
    if isinstance(weights, Mapping):
        for key, value in weights.items():
            vector[registry.index_of(key)] = float(value)
    else:
        given = np.asarray(weights, dtype=np.float64)
        if given.shape != vector.shape:
            raise ShapeError("estimate_task_weights", given.shape, vector.shape)
        vector[:] = given
    if np.any(~np.isfinite(vector)) or np.any(vector < 0):
        raise ValueError("manual task weights must be finite and nonnegative")
    total = float(vector.sum())
    if total == 0.0:
        raise ValueError("manual task weights are all zero")
    return vector / total


def estimate_task_weights(
    new_instruction: str,
    mode: str = "similarity",
    weights: Optional[WeightSpec] = None,
    registry: TaskRegistry = DEFAULT_REGISTRY,
) -> np.ndarray:
    """
    Per-task adapter weights for an unseen task.

    Args:
        new_instruction: Instruction of the new task (used in similarity mode)
        mode: "manual" (validate and renormalize ``weights``) or
            "similarity" (clamped cosine to every registered instruction)
        weights: Mapping key -> weight or a length-K vector, manual mode only
        registry: Task table supplying instructions and order

    Returns:
        Nonnegative float64 vector of length K summing to 1

    Raises:
        ValueError: unknown mode, missing or all-zero manual weights
    """
    if mode == "manual":
        if weights is None:
            raise ValueError("manual mode needs weights")
        return _manual_weights(weights, registry)
    if mode != "similarity":
        raise ValueError(f"unknown weight estimation mode: {mode!r}")

    query = encode_text(new_instruction).astype(np.float64)
    table = registry.instruction_embeddings().astype(np.float64)
    scores = np.array([cosine(query, row) for row in table])
    scores = np.clip(scores, 0.0, None)
    total = float(scores.sum())
    if total == 0.0:
        logger.warning("no registered instruction resembles %r; using uniform weights", new_instruction)
        return np.full(len(registry), 1.0 / len(registry))
    return scores / total


def _instruction_prefix(spec: TaskSpec) -> str:
    return spec.condition_name


def augment_prompt(prompt: str, background: str = "", foreground: str = "") -> str:
    """Append the "background" and "foreground" keywords used for hybrid conditions."""
    parts = [prompt.strip()]
    parts.append(f"{background} background".strip())
    parts.append(f"{foreground} foreground".strip())
    return ", ".join(part for part in parts if part)


@dataclass(frozen=True, eq=False)
class HybridInputs:
    instruction: str
    prompt: str
    conditioning: Conditioning


def compose_hybrid(
    task_a: str,
    cond_a: np.ndarray,
    task_b: str,
    cond_b: np.ndarray,
    prompt: str,
    registry: TaskRegistry = DEFAULT_REGISTRY,
    background: str = "",
    foreground: str = "",
) -> HybridInputs:
    """
    Model inputs for two simultaneous visual conditions.

    The first condition is treated as the background layout and the second
    as the foreground subject. Adapter features are the mean of the two
    single-task adapter outputs.

    Raises:
        UnknownTaskError: either task is not registered
        ShapeError: condition maps differ in shape
    """
    spec_a = registry.get(task_a)
    spec_b = registry.get(task_b)
    if np.shape(cond_a) != np.shape(cond_b):
        raise ShapeError("compose_hybrid", np.shape(cond_a), np.shape(cond_b))
    instruction = f"{_instruction_prefix(spec_a)} and {_instruction_prefix(spec_b)} to image"
    sources = (
        ConditionSource(np.asarray(cond_a), registry.one_hot(task_a)),
        ConditionSource(np.asarray(cond_b), registry.one_hot(task_b)),
    )
    return HybridInputs(
        instruction=instruction,
        prompt=augment_prompt(prompt, background, foreground),
        conditioning=Conditioning(sources, encode_text(instruction), instruction),
    )


@dataclass(frozen=True)
class ZeroShotPreset:
    """A named unseen task: its instruction, weights and condition transform."""

    name: str
    instruction: str
    transform: str
    manual_weights: Optional[Tuple[Tuple[str, float], ...]] = None

    def weights(self, registry: TaskRegistry = DEFAULT_REGISTRY) -> np.ndarray:
        if self.manual_weights is not None:
            return estimate_task_weights(
                self.instruction, "manual", dict(self.manual_weights), registry
            )
        return estimate_task_weights(self.instruction, "similarity", registry=registry)


ZERO_SHOT_PRESETS: Dict[str, ZeroShotPreset] = {
    "colorization": ZeroShotPreset(
        "colorization",
        "gray image colorization",
        "gray",
        (("depth", 0.6), ("seg", 0.3), ("canny", 0.1)),
    ),
    "deblurring": ZeroShotPreset("deblurring", "image deblurring", "blur"),
    "inpainting": ZeroShotPreset(
        "inpainting", "image inpainting", "hole", (("outpainting", 1.0),)
    ),
}
