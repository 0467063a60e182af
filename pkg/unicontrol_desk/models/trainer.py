"""
Trainer - Multi-task training of the control branch
Each step samples one task uniformly, draws a single-task minibatch, runs
the noise-prediction loss through the controlled denoiser and applies
AdamW to every trainable tensor. The hypernet is frozen from the freeze
step on. An optional base-pretraining phase stands in for downloading a
pretrained text-to-image model.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
from tqdm import tqdm

from unicontrol_desk.models.checkpoint import Checkpoint, checkpoint_from_arrays
from unicontrol_desk.models.config import Config, TrainConfig
from unicontrol_desk.models.control import UniControlModel, init_unicontrol
from unicontrol_desk.models.datagen import Dataset, DatasetRecord
from unicontrol_desk.models.denoiser import UNetConfig, UNetDenoiser, denoiser_param_shapes, init_denoiser
from unicontrol_desk.models.diffusion import DiffusionBatch, NoiseSchedule, training_loss
from unicontrol_desk.models.errors import DatasetError, ShapeError
from unicontrol_desk.models.grad_core import Graph, ParameterMap, backward
from unicontrol_desk.models.optim import AdamW
from unicontrol_desk.models.tasks import (
    DEFAULT_REGISTRY,
    ConditionSource,
    Conditioning,
    TaskRegistry,
    encode_text,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
GradientHook = Callable[[int, str, ParameterMap], None]
StepHook = Callable[[int, str, float], None]
BASE_PHASE = "base"


def sample_task(rng: np.random.Generator, K: int) -> int:
    """
    Uniform task index in [0, K) from the shared training stream.

    Raises:
        ValueError: K < 1
    """
    if K < 1:
        raise ValueError(f"need at least one task, got K={K}")
    return int(rng.integers(0, K))


class _PromptCache:
    def __init__(self) -> None:
        self._cache: Dict[str, np.ndarray] = {}

    def __call__(self, text: str) -> np.ndarray:
        if text not in self._cache:
            self._cache[text] = encode_text(text)
        return self._cache[text]


def _draw_indices(rng: np.random.Generator, available: int, batch_size: int) -> np.ndarray:
    return rng.choice(available, size=batch_size, replace=available < batch_size)


def _write_loss(stream: Optional[TextIO], step: int, task: str, loss: float) -> None:
    if stream is not None:
        stream.write(f"{step}\t{task}\t{loss!r}\n")


# ----------------------------------------------------------------------
# Base pretraining
# ----------------------------------------------------------------------


def pretrain_base(
    unet_config: UNetConfig,
    dataset: Dataset,
    train_config: TrainConfig,
    schedule: NoiseSchedule,
    loss_log: Optional[TextIO] = None,
    progress: bool = False,
) -> ParameterMap:
    """
    Train the base text-to-image denoiser on the dataset images.

    Same loss and prompt dropping as control training, no visual condition.
    Returns the parameters with nothing frozen; the caller freezes them.

    Raises:
        DatasetError: dataset is empty
    """
    if not dataset.records:
        raise DatasetError("no records to pretrain on", "dataset")
    params = init_denoiser(unet_config, train_config.seed)
    denoiser = UNetDenoiser(unet_config, params)
    optimizer = AdamW(params, lr=train_config.base_lr, weight_decay=train_config.weight_decay)
    rng = np.random.default_rng([train_config.seed, 2])
    prompts = _PromptCache()
    records = dataset.records

    for step in tqdm(range(train_config.base_steps), desc="pretrain", disable=not progress):
        picked = [records[i] for i in _draw_indices(rng, len(records), train_config.batch_size)]
        batch = DiffusionBatch(
            images=np.stack([r.image for r in picked]),
            text_emb=np.stack([prompts(r.prompt) for r in picked]),
            tasks=(BASE_PHASE,) * len(picked),
        )
        params.zero_grad()
        with Graph() as graph:
            loss = training_loss(denoiser, batch, schedule, train_config.drop_prob, rng)
        backward(graph, loss)
        optimizer.step()
        value = loss.item()
        _write_loss(loss_log, step, BASE_PHASE, value)
        if (step + 1) % train_config.log_every == 0:
            logger.info("pretrain step %d/%d loss %.5f", step + 1, train_config.base_steps, value)
    return params


# ----------------------------------------------------------------------
# Control training
# ----------------------------------------------------------------------


class Trainer:
    """
    Stateful multi-task loop over one UniControlModel.

    Hooks:
        on_gradients(step, task, params): after backward, before the update
        on_step(step, task, loss): after the update
    """

    def __init__(
        self,
        model: UniControlModel,
        train_config: TrainConfig,
        schedule: NoiseSchedule,
        dataset: Dataset,
        loss_log: Optional[TextIO] = None,
        step_offset: int = 0,
        progress: bool = False,
    ) -> None:
        for task in train_config.tasks:
            if not dataset.by_task(task):
                raise DatasetError(f"no training records for task {task!r}", "dataset")
            model.registry.get(task)
        self.model = model
        self.config = train_config
        self.schedule = schedule
        self.dataset = dataset
        self.loss_log = loss_log
        self.step_offset = step_offset
        self.progress = progress
        self.rng = np.random.default_rng(train_config.seed)
        self.optimizer = AdamW(model.params, lr=train_config.lr, weight_decay=train_config.weight_decay)
        self.step_count = 0
        self.losses: List[Tuple[int, str, float]] = []
        self.on_gradients: List[GradientHook] = []
        self.on_step: List[StepHook] = []
        self._prompts = _PromptCache()
        self._instructions = {
            task: encode_text(model.registry.instruction_for(task)) for task in train_config.tasks
        }

    @property
    def hypernet_frozen(self) -> bool:
        names = self.model.group_names("hypernet")
        return bool(names) and all(name in self.model.params.frozen for name in names)

    def make_batch(self, task: str) -> DiffusionBatch:
        records: Sequence[DatasetRecord] = self.dataset.by_task(task)
        picked = [records[i] for i in _draw_indices(self.rng, len(records), self.config.batch_size)]
        instruction = self._instructions[task]
        conditioning = Conditioning(
            sources=(ConditionSource(np.stack([r.condition for r in picked]), self.model.registry.one_hot(task)),),
            instruction=instruction,
            label=self.model.registry.instruction_for(task),
        )
        return DiffusionBatch(
            images=np.stack([r.image for r in picked]),
            text_emb=np.stack([self._prompts(r.prompt) for r in picked]),
            tasks=(task,) * len(picked),
            conditioning=conditioning,
        )

    def train_step(self) -> float:
        step = self.step_count
        if step >= self.config.freeze_step and not self.hypernet_frozen:
            names = self.model.group_names("hypernet")
            if names:
                self.model.params.freeze(names)
                logger.info("froze %d hypernet tensors at step %d", len(names), step)

        task = self.config.tasks[sample_task(self.rng, len(self.config.tasks))]
        batch = self.make_batch(task)
        self.model.params.zero_grad()
        with Graph() as graph:
            loss = training_loss(self.model, batch, self.schedule, self.config.drop_prob, self.rng)
        backward(graph, loss)
        for hook in self.on_gradients:
            hook(step, task, self.model.params)
        self.optimizer.step()

        value = loss.item()
        self.losses.append((step, task, value))
        _write_loss(self.loss_log, self.step_offset + step, task, value)
        for step_hook in self.on_step:
            step_hook(step, task, value)
        if (step + 1) % self.config.log_every == 0:
            logger.info("step %d/%d task %s loss %.5f", step + 1, self.config.steps, task, value)
        logger.debug("step %d task %s loss %.6f", step, task, value)
        self.step_count += 1
        return value

    def run(self, steps: Optional[int] = None) -> List[Tuple[int, str, float]]:
        total = self.config.steps if steps is None else steps
        for _ in tqdm(range(total), desc="train", disable=not self.progress):
            self.train_step()
        return self.losses

    def checkpoint(self, config: Config) -> Checkpoint:
        return checkpoint_from_arrays(
            self.model.params.arrays(),
            step=self.step_count,
            config=config.to_dict(),
            rng=self.rng.bit_generator.state,
            frozen=tuple(self.model.params.frozen),
        )


def train(
    config: Config,
    dataset: Dataset,
    base: Optional[ParameterMap] = None,
    loss_log: Optional[PathLike] = None,
    progress: bool = False,
    registry: TaskRegistry = DEFAULT_REGISTRY,
) -> Checkpoint:
    """
    Train the control branch and return the final checkpoint.

    Args:
        config: Run configuration
        dataset: Records for every configured task
        base: Pretrained base parameters; when None and base_steps > 0 the
            base is pretrained here first, otherwise randomly initialized
        loss_log: Path of the "step<TAB>task<TAB>loss" log
        progress: Show tqdm progress bars

    Raises:
        DatasetError: a configured task has no records
    """
    train_config = config.train_config()
    for task in train_config.tasks:
        if not dataset.by_task(task):
            raise DatasetError(f"no training records for task {task!r}", "dataset")
    schedule = config.schedule()
    stream: Optional[TextIO] = None
    if loss_log is not None:
        try:
            stream = open(loss_log, "w", encoding="utf-8")
        except OSError as exc:
            raise DatasetError(f"cannot write loss log ({exc.strerror})", loss_log) from exc
    try:
        offset = 0
        if base is None and train_config.base_steps > 0:
            base = pretrain_base(config.unet_config(), dataset, train_config, schedule, stream, progress)
            offset = train_config.base_steps
        model = init_unicontrol(
            config.unet_config(), config.control_config(registry), train_config.seed, base=base, registry=registry
        )
        trainer = Trainer(model, train_config, schedule, dataset, stream, offset, progress)
        trainer.run()
    finally:
        if stream is not None:
            stream.close()
    return trainer.checkpoint(config)


def pretrain(config: Config, dataset: Dataset, progress: bool = False) -> Checkpoint:
    """Base-only pretraining checkpoint (unprefixed denoiser names)."""
    params = pretrain_base(
        config.unet_config(), dataset, config.train_config(), config.schedule(), progress=progress
    )
    return checkpoint_from_arrays(params.arrays(), step=config.base_steps, config=config.to_dict())


def base_from_checkpoint(checkpoint: Checkpoint, unet_config: UNetConfig) -> ParameterMap:
    """
    Base parameters from a pretraining or a full checkpoint.

    Raises:
        ShapeError: tensors do not match the configured denoiser
    """
    expected = denoiser_param_shapes(unet_config)
    prefix = "base." if any(name.startswith("base.") for name in checkpoint.tensors) else ""
    arrays = {}
    for name, shape in expected.items():
        array = checkpoint.tensors.get(prefix + name)
        if array is None or tuple(array.shape) != shape:
            found = None if array is None else array.shape
            raise ShapeError("base_from_checkpoint", shape, found, detail=prefix + name)
        arrays[name] = array
    return ParameterMap.from_arrays(arrays)


def model_from_checkpoint(
    checkpoint: Checkpoint, registry: TaskRegistry = DEFAULT_REGISTRY
) -> Tuple[Config, UniControlModel]:
    """Rebuild the config and model stored in a training checkpoint."""
    config = Config.from_dict(checkpoint.config)
    model = UniControlModel.from_state(
        config.unet_config(),
        config.control_config(registry),
        checkpoint.tensors,
        frozen=checkpoint.frozen,
        registry=registry,
    )
    return config, model


# ----------------------------------------------------------------------
# Parameter accounting
# ----------------------------------------------------------------------


@dataclass
class ParamTable:
    """
    Parameter counts of the unified model against per-task alternatives.

    Attributes:
        rows: (label, count) per component
        num_tasks: K
        base: Base denoiser parameters
        control: One control branch (trainable copy plus zero convolutions)
        adapter_module: One adapter module
        hypernet: Hypernet projections
    """

    num_tasks: int
    base: int
    control: int
    adapter_module: int
    hypernet: int
    rows: List[Tuple[str, int]] = field(default_factory=list)

    @property
    def unified(self) -> int:
        return int(sum(count for _, count in self.rows))

    @property
    def single_task(self) -> int:
        return self.base + self.control + self.adapter_module

    @property
    def stacked(self) -> int:
        """K independent single-task models, K x (base + control)."""
        return self.num_tasks * self.single_task

    @property
    def multi_controlnet(self) -> int:
        """One shared base plus K separate control branches."""
        return self.base + self.num_tasks * (self.control + self.adapter_module)

    @property
    def task_specific(self) -> int:
        """Everything the unified model adds to serve K tasks instead of one."""
        return self.unified - self.single_task


def count_params(model: UniControlModel) -> ParamTable:
    counts = model.group_counts()
    modules = model.control_config.adapter_modules()
    adapter_rows = [
        (f"adapter module {module}", model.params.subset(f"adapter.{module}.").count()) for module in modules
    ]
    table = ParamTable(
        num_tasks=model.control_config.num_tasks,
        base=counts["base"],
        control=counts["copy"] + counts["zero"],
        adapter_module=adapter_rows[0][1],
        hypernet=counts["hypernet"],
    )
    table.rows = [
        ("base denoiser (frozen)", counts["base"]),
        ("control copy", counts["copy"]),
        ("zero convolutions", counts["zero"]),
        *adapter_rows,
        ("hypernet", counts["hypernet"]),
    ]
    return table
