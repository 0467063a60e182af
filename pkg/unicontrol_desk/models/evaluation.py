"""
Evaluation - Condition fidelity of generated images
Samples images for held-out conditions, re-derives each condition from the
generated pixels and scores it against the input condition. The same
prompts sampled through the null condition give the unconditional baseline.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage.draw import polygon_perimeter

from unicontrol_desk.models.checkpoint import Checkpoint
from unicontrol_desk.models.config import Config
from unicontrol_desk.models.control import UniControlModel
from unicontrol_desk.models.datagen import (
    ALL_COLORS,
    PALETTE,
    Dataset,
    DatasetRecord,
    canny_edges,
    color_classes,
    generate_sample,
)
from unicontrol_desk.models.diffusion import sample_images
from unicontrol_desk.models.rng import derive_seed
from unicontrol_desk.models.tasks import ConditionSource, Conditioning, encode_text
from unicontrol_desk.models.trainer import model_from_checkpoint

logger = logging.getLogger(__name__)

EDGE_TASKS = ("canny", "hed", "hedsketch", "normal")
EVAL_CANNY = (0.1, 0.3)
HOLDOUT_SALT = 0x484F4C44
FLAT_NORMAL = np.array([0.5, 0.5, 1.0], dtype=np.float32)
OUTPAINT_AGREEMENT = 0.1

Generator = Callable[[Sequence[DatasetRecord], Optional[Conditioning]], np.ndarray]


def dilate(mask: np.ndarray, pixels: int = 1) -> np.ndarray:
    if pixels <= 0:
        return mask
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool), iterations=pixels)


def tolerant_iou(pred: np.ndarray, target: np.ndarray, tolerance: int = 0) -> Tuple[float, float]:
    """
    IoU and F1 of two masks where a pixel within ``tolerance`` of the other
    mask counts as matched. Two empty masks score 1.

    Returns:
        (iou, f1)
    """
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    n_pred, n_target = int(pred.sum()), int(target.sum())
    if n_pred == 0 and n_target == 0:
        return 1.0, 1.0
    hit_pred = int((pred & dilate(target, tolerance)).sum())
    hit_target = int((target & dilate(pred, tolerance)).sum())
    inter = 0.5 * (hit_pred + hit_target)
    iou = inter / (n_pred + n_target - inter)
    precision = hit_pred / n_pred if n_pred else 0.0
    recall = hit_target / n_target if n_target else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return float(iou), float(f1)


def palette_foreground(image: np.ndarray) -> np.ndarray:
    """Pixels whose nearest scene colour is a primitive colour."""
    return color_classes(image) < len(PALETTE)


def color_boxes(image: np.ndarray) -> np.ndarray:
    """Outline of the extent of every primitive colour present in ``image``."""
    classes = color_classes(image)
    out = np.zeros(classes.shape, dtype=bool)
    for index, _ in enumerate(ALL_COLORS[: len(PALETTE)]):
        rows, cols = np.nonzero(classes == index)
        if rows.size == 0:
            continue
        r0, r1, c0, c1 = rows.min(), rows.max(), cols.min(), cols.max()
        rr, cc = polygon_perimeter([r0, r0, r1, r1], [c0, c1, c1, c0], shape=classes.shape)
        out[rr, cc] = True
    return out


def condition_mask(task: str, condition: np.ndarray) -> np.ndarray:
    """Binary structure of a stored condition map, (S, S)."""
    if task in ("canny", "hed", "hedsketch"):
        return condition[0] > 0.5
    if task == "normal":
        return np.abs(condition - FLAT_NORMAL[:, None, None]).max(axis=0) > 1e-3
    return condition.max(axis=0) > 0


def rederive_mask(task: str, image: np.ndarray) -> np.ndarray:
    """The same structure recovered from a generated image in [-1, 1]."""
    if task in EDGE_TASKS:
        return canny_edges(image, *EVAL_CANNY)
    if task == "bbox":
        return color_boxes(image)
    return palette_foreground(image)


def score_sample(task: str, image: np.ndarray, condition: np.ndarray) -> Tuple[float, float]:
    """
    (iou, f1) of one generated image against its input condition.

    Outpainting scores the share of visible condition pixels the image
    reproduces within 0.1 (both values).
    """
    if task == "outpainting":
        kept = condition.max(axis=0) > 0
        if not kept.any():
            return 1.0, 1.0
        unit = (np.clip(image, -1.0, 1.0) + 1.0) / 2.0
        agree = np.abs(unit - condition).max(axis=0) < OUTPAINT_AGREEMENT
        share = float(agree[kept].mean())
        return share, share
    tolerance = 1 if task in EDGE_TASKS + ("pose", "bbox") else 0
    return tolerant_iou(rederive_mask(task, image), condition_mask(task, condition), tolerance)


@dataclass
class FidelityReport:
    task: str
    metric: str
    conditional: List[Tuple[float, float]] = field(default_factory=list)
    unconditional: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return len(self.conditional)

    @staticmethod
    def _mean(rows: Sequence[Tuple[float, float]], column: int) -> float:
        return float(np.mean([row[column] for row in rows])) if rows else 0.0

    @property
    def conditional_iou(self) -> float:
        return self._mean(self.conditional, 0)

    @property
    def conditional_f1(self) -> float:
        return self._mean(self.conditional, 1)

    @property
    def unconditional_iou(self) -> float:
        return self._mean(self.unconditional, 0)

    @property
    def unconditional_f1(self) -> float:
        return self._mean(self.unconditional, 1)


def holdout_dataset(task: str, n_samples: int, seed: int, config: Config) -> Dataset:
    """Fresh scenes under a salted seed so they do not repeat training indices."""
    samples = [
        generate_sample(derive_seed(seed ^ HOLDOUT_SALT, i), (task,), config.datagen_config())
        for i in range(n_samples)
    ]
    return Dataset.from_samples(samples, (task,))


def model_generator(
    model: UniControlModel, config: Config, seed: int, progress: bool = False
) -> Generator:
    """Generator sampling the whole batch of records with one DDIM run."""
    schedule = config.schedule()
    guidance = config.guidance_config()

    def generate(records: Sequence[DatasetRecord], conditioning: Optional[Conditioning]) -> np.ndarray:
        text = np.stack([encode_text(r.prompt) for r in records])
        return sample_images(
            model, text, conditioning, schedule, guidance, seed, len(records), config.image_size, progress
        )

    return generate


def eval_condition_fidelity(
    source: Union[Checkpoint, UniControlModel],
    task: str,
    n_samples: int,
    seed: int,
    config: Optional[Config] = None,
    dataset: Optional[Dataset] = None,
    generator: Optional[Generator] = None,
    progress: bool = False,
) -> FidelityReport:
    """
    Conditional and unconditional fidelity over ``n_samples`` conditions.

    Args:
        source: Trained checkpoint or model
        task: Task key to evaluate
        n_samples: Number of conditions (taken from ``dataset`` when given)
        seed: Seeds both the held-out scenes and the samplers
        config: Needed with a model source; a checkpoint carries its own
        dataset: Held-out records; fresh scenes are generated when None
        generator: Replaces DDIM sampling (records, conditioning) -> images

    Raises:
        UnknownTaskError: task is not registered
        ValueError: n_samples < 1 or the dataset has no records for task
    """
    if isinstance(source, Checkpoint):
        config, model = model_from_checkpoint(source)
    else:
        model = source
        config = config or Config()
    spec = model.registry.get(task)
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    records = list((dataset or holdout_dataset(task, n_samples, seed, config)).by_task(task))[:n_samples]
    if not records:
        raise ValueError(f"no held-out records for task {task!r}")
    generate = generator or model_generator(model, config, seed, progress)

    conditioning = Conditioning(
        sources=(ConditionSource(np.stack([r.condition for r in records]), model.registry.one_hot(task)),),
        instruction=encode_text(spec.instruction),
        label=spec.instruction,
    )
    cond_images = generate(records, conditioning)
    uncond_images = generate(records, Conditioning.null())

    metric = "agreement" if task == "outpainting" else "iou"
    report = FidelityReport(task=task, metric=metric)
    for record, cond_image, uncond_image in zip(records, cond_images, uncond_images):
        report.conditional.append(score_sample(task, cond_image, record.condition))
        report.unconditional.append(score_sample(task, uncond_image, record.condition))
    logger.info(
        "fidelity %s: conditional %.4f vs unconditional %.4f over %d samples",
        task, report.conditional_iou, report.unconditional_iou, report.n_samples,
    )
    return report
