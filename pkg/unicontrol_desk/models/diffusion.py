"""
Diffusion - Forward noising, training loss, guidance and DDIM sampling
Operates in pixel space on (N, 3, S, S) float32 arrays. Models plug in
through the NoisePredictor protocol so stubs and the real network share
one code path.
"""

import logging
from dataclasses import dataclass
from typing import Any, Protocol, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from unicontrol_desk.models.errors import ShapeError
from unicontrol_desk.models.grad_core import Tensor, default_dtype, mse

logger = logging.getLogger(__name__)

Steps = Union[int, Sequence[int], np.ndarray]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """
    Linear beta schedule; index with 1-based step t via the accessors.

    Arrays are float64 of length T.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t: Steps) -> np.ndarray:
        steps = np.asarray(t)
        if np.any(steps < 1) or np.any(steps > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        return self.alpha_bar[steps - 1]


def make_schedule(T: int = 200, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """
    Build a linear noise schedule.

    Args:
        T: Number of diffusion steps (>= 1)
        beta_min: First beta, 0 < beta_min <= beta_max
        beta_max: Last beta, < 1

    Raises:
        ValueError: parameters out of range
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    steps = np.arange(T, dtype=np.float64)
    beta = beta_min + steps / max(T - 1, 1) * (beta_max - beta_min)
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


@dataclass(frozen=True)
class GuidanceConfig:
    weight: float = 9.0
    steps: int = 50
    prompt_drop_prob: float = 0.30

    def __post_init__(self) -> None:
        if self.weight < 0:
            raise ValueError(f"guidance weight must be >= 0, got {self.weight}")
        if self.steps < 1:
            raise ValueError(f"DDIM steps must be >= 1, got {self.steps}")
        if not 0 <= self.prompt_drop_prob <= 1:
            raise ValueError(f"prompt drop probability must lie in [0, 1], got {self.prompt_drop_prob}")


def _per_sample(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape((-1,) + (1,) * (ndim - 1)) if values.ndim else values


def add_noise(x0: np.ndarray, t: Steps, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """
    x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps.

    ``t`` is a scalar or one step per leading-axis sample.
    """
    if np.shape(eps) != np.shape(x0):
        raise ShapeError("add_noise", np.shape(x0), np.shape(eps))
    ab = _per_sample(np.asarray(schedule.alpha_bar_at(t), dtype=np.float64), np.ndim(x0))
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(np.asarray(x0).dtype, copy=False)


def predict_x0(x_t: np.ndarray, t: Steps, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Invert add_noise given a noise estimate."""
    ab = _per_sample(np.asarray(schedule.alpha_bar_at(t), dtype=np.float64), np.ndim(x_t))
    out = (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    return out.astype(np.asarray(x_t).dtype, copy=False)


class NoisePredictor(Protocol):
    """Anything that maps (x_t, t, text_emb, conditioning) to a noise estimate."""

    def predict_noise(
        self, x_t: Tensor, t: np.ndarray, text_emb: np.ndarray, conditioning: Any
    ) -> Tensor:
        ...


@dataclass(frozen=True, eq=False)
class DiffusionBatch:
    """
    Single-task minibatch.

    Attributes:
        images: (N, 3, S, S) targets in [-1, 1]
        text_emb: (N, 64) prompt embeddings
        tasks: task key per sample; all must agree
        conditioning: passed to the model unchanged
    """

    images: np.ndarray
    text_emb: np.ndarray
    tasks: Tuple[str, ...]
    conditioning: Any = None

    @property
    def size(self) -> int:
        return int(self.images.shape[0])


def training_loss(
    model: NoisePredictor,
    batch: DiffusionBatch,
    schedule: NoiseSchedule,
    drop_prob: float,
    rng: np.random.Generator,
) -> Tensor:
    """
    Noise-prediction MSE on one single-task minibatch.

    Per sample: t uniform in [1, T], eps standard normal, and the prompt
    embedding replaced by the null (all-zero) embedding with probability
    ``drop_prob``. Task instruction and visual condition are never dropped.

    Raises:
        ValueError: batch mixes tasks
    """
    if len(set(batch.tasks)) > 1:
        raise ValueError(f"training batch mixes tasks: {sorted(set(batch.tasks))}")
    n = batch.size
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(batch.images.shape).astype(default_dtype())
    drop = rng.random(n) < drop_prob
    text = np.array(batch.text_emb, dtype=np.float32, copy=True)
    text[drop] = 0.0
    x_t = add_noise(batch.images.astype(default_dtype()), t, eps, schedule)
    prediction = model.predict_noise(Tensor(x_t), t, text, batch.conditioning)
    return mse(prediction, Tensor(eps))


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free guidance: eps_uncond + w * (eps_cond - eps_uncond)."""
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ShapeError("cfg_combine", np.shape(eps_cond), np.shape(eps_uncond))
    if w == 1:
        return eps_cond
    if w == 0:
        return eps_uncond
    return eps_uncond + float(w) * (eps_cond - eps_uncond)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced descending subsequence of 1..T, starting at T."""
    if not 1 <= steps <= T:
        raise ValueError(f"DDIM steps must lie in [1, {T}], got {steps}")
    return np.round(np.linspace(T, 1, steps)).astype(np.int64)


@dataclass(frozen=True, eq=False)
class SamplingInputs:
    """Prompt embeddings, conditioning and output shape for one sampling run."""

    text_emb: np.ndarray
    conditioning: Any
    shape: Tuple[int, int, int, int]


def ddim_sample(
    model: NoisePredictor,
    cond_inputs: SamplingInputs,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    seed: int,
    progress: bool = False,
) -> np.ndarray:
    """
    Deterministic (eta = 0) DDIM with classifier-free guidance.

    The model runs once with the prompt embedding and once with the null
    embedding per step (once when the weight is 1). Output is clamped to
    [-1, 1].

    Raises:
        ValueError: more steps than the schedule has
    """
    seq = ddim_timesteps(schedule.T, guidance.steps)
    n = cond_inputs.shape[0]
    text_emb = np.asarray(cond_inputs.text_emb, dtype=np.float32)
    text = np.broadcast_to(text_emb, (n, text_emb.shape[-1]))
    null_text = np.zeros_like(text)
    x = np.random.default_rng(seed).standard_normal(cond_inputs.shape).astype(np.float32)

    for i, step in enumerate(tqdm(seq, desc="ddim", disable=not progress, leave=False)):
        t = np.full(n, step, dtype=np.int64)
        x_in = Tensor(x)
        eps_cond = model.predict_noise(x_in, t, text, cond_inputs.conditioning).data
        if guidance.weight == 1:
            eps = eps_cond
        else:
            eps_uncond = model.predict_noise(x_in, t, null_text, cond_inputs.conditioning).data
            eps = cfg_combine(eps_cond, eps_uncond, guidance.weight)
        ab_t = float(schedule.alpha_bar[step - 1])
        ab_prev = float(schedule.alpha_bar[seq[i + 1] - 1]) if i + 1 < len(seq) else 1.0
        x0 = (x - (1.0 - ab_t) ** 0.5 * eps) / ab_t**0.5
        x = (ab_prev**0.5 * x0 + (1.0 - ab_prev) ** 0.5 * eps).astype(np.float32)
    logger.debug("ddim: %d steps, guidance %.2f", len(seq), guidance.weight)
    return np.clip(x, -1.0, 1.0)


def sample_images(
    model: NoisePredictor,
    text_emb: np.ndarray,
    conditioning: Any,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    seed: int,
    count: int,
    image_size: int,
    progress: bool = False,
) -> np.ndarray:
    """Convenience wrapper building SamplingInputs for ``count`` images."""
    inputs = SamplingInputs(
        text_emb=np.asarray(text_emb, dtype=np.float32).reshape(-1, np.shape(text_emb)[-1]),
        conditioning=conditioning,
        shape=(count, 3, image_size, image_size),
    )
    return ddim_sample(model, inputs, schedule, guidance, seed, progress=progress)
