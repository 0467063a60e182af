"""
Config - Run configuration documents
Plain-text ``key=value`` files (``#`` comments and blank lines allowed)
parsed into a frozen dataclass. Every key has a default; unknown keys are
rejected. The dataclass projects onto the per-module configs.

Example:
    # toy run
    base_channels=16
    tasks=canny,seg,outpainting
    steps=2000
"""

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

from unicontrol_desk.models.control import ControlConfig
from unicontrol_desk.models.datagen import DatagenConfig
from unicontrol_desk.models.denoiser import UNetConfig
from unicontrol_desk.models.diffusion import GuidanceConfig, NoiseSchedule, make_schedule
from unicontrol_desk.models.errors import ConfigError, DatasetError
from unicontrol_desk.models.tasks import DEFAULT_REGISTRY, TaskRegistry

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


@dataclass(frozen=True)
class TrainConfig:
    """
    Multi-task training settings.

    Attributes:
        tasks: Task keys trained (a subset of the registry)
        steps: Optimizer steps of the control branch
        batch_size: Samples per single-task minibatch
        lr: AdamW learning rate (toy scale; 1e-5 is the large-model value)
        weight_decay: Decoupled weight decay
        drop_prob: Probability of replacing the prompt with the null embedding
        freeze_step: Step from which the hypernet stops updating
        seed: Seed of the training stream
        base_steps: Base pretraining steps when no base is supplied
        base_lr: Learning rate of base pretraining
        log_every: INFO log interval in steps
    """

    tasks: Tuple[str, ...] = ("canny", "seg", "outpainting")
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    drop_prob: float = 0.30
    freeze_step: int = 1600
    seed: int = 0
    base_steps: int = 0
    base_lr: float = 1e-3
    log_every: int = 50

    def __post_init__(self) -> None:
        if not self.tasks:
            raise ConfigError("at least one training task is required")
        if self.steps < 0 or self.base_steps < 0:
            raise ConfigError("steps and base_steps must be >= 0")
        if self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("batch_size and log_every must be >= 1")
        if self.lr <= 0 or self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rates must be positive and weight decay >= 0")
        if not 0 <= self.drop_prob <= 1:
            raise ConfigError(f"drop_prob must lie in [0, 1], got {self.drop_prob}")
        if not 0 <= self.freeze_step <= self.steps:
            raise ConfigError(f"freeze step {self.freeze_step} outside [0, {self.steps}]")


@dataclass(frozen=True)
class Config:
    """Every run setting, flat, with documented defaults."""

    # model
    image_size: int = 32
    base_channels: int = 32
    channel_mults: Tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = 128
    blocks_per_level: int = 1
    adapter_depth: int = 2
    adapter_hidden: int = 16
    moe_adapter: bool = True
    hypernet: bool = True
    # diffusion
    T: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02
    guidance_weight: float = 9.0
    ddim_steps: int = 50
    # training
    tasks: Tuple[str, ...] = ("canny", "seg", "outpainting")
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    drop_prob: float = 0.30
    freeze_frac: float = 0.8
    base_steps: int = 0
    base_lr: float = 1e-3
    log_every: int = 50
    seed: int = 0
    # data
    canny_low_min: float = 0.05
    canny_low_max: float = 0.2
    canny_high_min: float = 0.2
    canny_high_max: float = 0.5
    sketch_sigma: float = 1.0
    sketch_threshold: float = 0.3

    def __post_init__(self) -> None:
        if not 0 <= self.freeze_frac <= 1:
            raise ConfigError(f"freeze_frac must lie in [0, 1], got {self.freeze_frac}")
        for key in self.tasks:
            if key not in DEFAULT_REGISTRY:
                raise ConfigError(f"unknown task in config: {key!r}")
        # Projections validate their own ranges.
        self.unet_config()
        self.control_config()
        self.train_config()
        self.guidance_config()
        self.datagen_config()
        if self.ddim_steps > self.T:
            raise ConfigError(f"ddim_steps {self.ddim_steps} exceeds T {self.T}")
        try:
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- projections ---------------------------------------------------

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            image_size=self.image_size,
            base_channels=self.base_channels,
            channel_mults=tuple(self.channel_mults),
            time_embed_dim=self.time_embed_dim,
            blocks_per_level=self.blocks_per_level,
        )

    def control_config(self, registry: TaskRegistry = DEFAULT_REGISTRY) -> ControlConfig:
        return ControlConfig(
            num_tasks=len(registry),
            adapter_hidden=self.adapter_hidden,
            adapter_depth=self.adapter_depth,
            moe_adapter=self.moe_adapter,
            hypernet=self.hypernet,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            tasks=tuple(self.tasks),
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            drop_prob=self.drop_prob,
            freeze_step=int(round(self.freeze_frac * self.steps)),
            seed=self.seed,
            base_steps=self.base_steps,
            base_lr=self.base_lr,
            log_every=self.log_every,
        )

    def guidance_config(self) -> GuidanceConfig:
        try:
            return GuidanceConfig(
                weight=self.guidance_weight, steps=self.ddim_steps, prompt_drop_prob=self.drop_prob
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def datagen_config(self) -> DatagenConfig:
        return DatagenConfig(
            canvas_size=self.image_size,
            canny_low=(self.canny_low_min, self.canny_low_max),
            canny_high=(self.canny_high_min, self.canny_high_max),
            sketch_sigma=self.sketch_sigma,
            sketch_threshold=self.sketch_threshold,
        )

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_min, self.beta_max)

    # -- persistence ---------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["channel_mults"] = list(self.channel_mults)
        data["tasks"] = list(self.tasks)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(data)
        for key in ("channel_mults", "tasks"):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name}={text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "Config":
        """
        Parse a ``key=value`` document.

        Raises:
            ConfigError: malformed line, unknown key, duplicate key or bad value
        """
        defaults = cls()
        known = {f.name for f in fields(cls)}
        values: Dict[str, Any] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ConfigError(f"line {number}: expected key=value, got {raw!r}")
            if key not in known:
                raise ConfigError(f"line {number}: unknown config key {key!r}")
            if key in values:
                raise ConfigError(f"line {number}: duplicate config key {key!r}")
            values[key] = _convert(key, value, getattr(defaults, key), number)
        return cls(**values)

    @classmethod
    def load(cls, path: PathLike) -> "Config":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DatasetError(f"cannot read config ({exc.strerror})", path) from exc
        config = cls.parse(text)
        logger.debug("loaded config %s", path)
        return config


def _convert(key: str, value: str, default: Any, number: int) -> Any:
    try:
        if isinstance(default, bool):
            lowered = value.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [item.strip() for item in value.split(",") if item.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(item) for item in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"line {number}: bad value for {key}: {value!r}") from None
    return value
