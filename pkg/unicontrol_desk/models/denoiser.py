"""
Denoiser - Toy pixel-space U-Net noise predictor and its trainable copy
Text enters additively through the timestep-embedding pathway; there is no
attention. The encoder exposes one feature map per injection point (every
skip plus the middle block) so a control branch can add residuals there.

Parameter names:
    time_embed.*, text_proj.*, input.*, middle.*   encoder side (cloned)
    output.*, out.*                                decoder side (base only)
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import truncnorm

from unicontrol_desk.models.errors import ConfigError, ShapeError
from unicontrol_desk.models.grad_core import (
    ParameterMap,
    Tensor,
    add,
    avgpool2x,
    channel_norm,
    concat,
    conv2d,
    linear,
    reshape,
    silu,
    upsample_nearest2x,
)

logger = logging.getLogger(__name__)

ENCODER_PREFIXES: Tuple[str, ...] = ("time_embed.", "text_proj.", "input.", "middle.")
INIT_STD = 0.02

DenoiserParams = ParameterMap
ArrayOrTensor = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: Tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = 128
    text_embed_dim: int = 64
    blocks_per_level: int = 1

    def __post_init__(self) -> None:
        if not self.channel_mults or any(m < 1 for m in self.channel_mults):
            raise ConfigError(f"channel_mults must be positive, got {self.channel_mults}")
        if min(self.image_size, self.in_channels, self.base_channels, self.blocks_per_level) < 1:
            raise ConfigError("image_size, in_channels, base_channels and blocks_per_level must be >= 1")
        if self.image_size % (2 ** (self.levels - 1)):
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2^{self.levels - 1}"
            )
        if self.time_embed_dim < 2 or self.text_embed_dim < 1:
            raise ConfigError("embedding dimensions too small")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    def level_channels(self, level: int) -> int:
        return self.base_channels * self.channel_mults[level]

    def injection_channels(self) -> List[int]:
        """Channel count of every encoder feature handed to the decoder, middle last."""
        channels = [self.base_channels]
        for level in range(self.levels):
            channels.extend([self.level_channels(level)] * self.blocks_per_level)
            if level < self.levels - 1:
                channels.append(self.level_channels(level))
        channels.append(self.level_channels(self.levels - 1))
        return channels

    @property
    def injection_count(self) -> int:
        return len(self.injection_channels())


def _resblock_shapes(prefix: str, cin: int, cout: int, temb: int) -> List[Tuple[str, Tuple[int, ...]]]:
    shapes = [
        (f"{prefix}norm1.gamma", (cin,)),
        (f"{prefix}norm1.beta", (cin,)),
        (f"{prefix}conv1.weight", (cout, cin, 3, 3)),
        (f"{prefix}conv1.bias", (cout,)),
        (f"{prefix}emb.weight", (cout, temb)),
        (f"{prefix}emb.bias", (cout,)),
        (f"{prefix}norm2.gamma", (cout,)),
        (f"{prefix}norm2.beta", (cout,)),
        (f"{prefix}conv2.weight", (cout, cout, 3, 3)),
        (f"{prefix}conv2.bias", (cout,)),
    ]
    if cin != cout:
        shapes += [(f"{prefix}skip.weight", (cout, cin, 1, 1)), (f"{prefix}skip.bias", (cout,))]
    return shapes


def denoiser_param_shapes(config: UNetConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Every parameter name and shape, in creation order."""
    c0, temb = config.base_channels, config.time_embed_dim
    shapes: List[Tuple[str, Tuple[int, ...]]] = [
        ("time_embed.0.weight", (temb, c0)),
        ("time_embed.0.bias", (temb,)),
        ("time_embed.2.weight", (temb, temb)),
        ("time_embed.2.bias", (temb,)),
        ("text_proj.weight", (temb, config.text_embed_dim)),
        ("text_proj.bias", (temb,)),
        ("input.conv_in.weight", (c0, config.in_channels, 3, 3)),
        ("input.conv_in.bias", (c0,)),
    ]
    ch = c0
    for level in range(config.levels):
        out = config.level_channels(level)
        for block in range(config.blocks_per_level):
            shapes += _resblock_shapes(f"input.{level}.{block}.", ch, out, temb)
            ch = out
    shapes += _resblock_shapes("middle.res.", ch, ch, temb)

    skips = config.injection_channels()[:-1]
    for level in reversed(range(config.levels)):
        out = config.level_channels(level)
        for block in range(config.blocks_per_level + 1):
            shapes += _resblock_shapes(f"output.{level}.{block}.", ch + skips.pop(), out, temb)
            ch = out
        if level > 0:
            shapes += [(f"output.{level}.up.weight", (ch, ch, 3, 3)), (f"output.{level}.up.bias", (ch,))]
    shapes += [
        ("out.norm.gamma", (ch,)),
        ("out.norm.beta", (ch,)),
        ("out.conv.weight", (config.in_channels, ch, 3, 3)),
        ("out.conv.bias", (config.in_channels,)),
    ]
    return OrderedDict(shapes)


def truncated_normal(rng: np.random.Generator, shape: Sequence[int], std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    size = int(np.prod(shape)) if len(shape) else 1
    values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=size, random_state=rng)
    return np.asarray(values, dtype=np.float32).reshape(tuple(shape))


def initial_value(name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Truncated-normal weights, zero biases and shifts, unit norm scales."""
    if name.endswith(".gamma"):
        return np.ones(shape, dtype=np.float32)
    if name.endswith(".weight"):
        return truncated_normal(rng, shape)
    return np.zeros(shape, dtype=np.float32)


def init_denoiser(config: UNetConfig, seed: int) -> DenoiserParams:
    """Freshly initialized base denoiser parameters (all trainable)."""
    rng = np.random.default_rng(seed)
    arrays = {name: initial_value(name, shape, rng) for name, shape in denoiser_param_shapes(config).items()}
    return ParameterMap.from_arrays(arrays)


def encoder_names(params: ParameterMap) -> List[str]:
    return [name for name in params if name.startswith(ENCODER_PREFIXES)]


def clone_trainable_copy(base: DenoiserParams) -> DenoiserParams:
    """
    Trainable copy G of the encoder and middle blocks.

    The copy owns its arrays; the base map is left untouched.
    """
    return ParameterMap.from_arrays({name: base[name].data.copy() for name in encoder_names(base)})


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, (N,) -> (N, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


class UNetDenoiser:
    """
    Functional U-Net over a parameter map.

    ``embed`` and ``encode`` take an optional parameter map so the same
    code runs the frozen base and the trainable copy.
    """

    def __init__(self, config: UNetConfig, params: DenoiserParams) -> None:
        self.config = config
        self.params = params

    # -- helpers -------------------------------------------------------

    def _prepare(
        self, x_t: ArrayOrTensor, t: Union[int, np.ndarray], text_emb: np.ndarray
    ) -> Tuple[Tensor, np.ndarray, np.ndarray]:
        x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        c, s = self.config.in_channels, self.config.image_size
        if x.data.ndim != 4 or x.shape[1:] != (c, s, s):
            raise ShapeError("denoiser input", x.shape, ("N", c, s, s))
        n = x.shape[0]
        steps = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        if np.any(steps < 1):
            raise ValueError(f"timesteps must be >= 1, got {steps.min()}")
        text = np.asarray(text_emb, dtype=np.float32)
        if text.shape[-1] != self.config.text_embed_dim:
            raise ShapeError("text embedding", text.shape, (n, self.config.text_embed_dim))
        text = np.broadcast_to(text.reshape(-1, self.config.text_embed_dim), (n, self.config.text_embed_dim))
        return x, steps, text

    def _resblock(self, p: DenoiserParams, prefix: str, h: Tensor, emb_act: Tensor) -> Tensor:
        x = silu(channel_norm(h, p[f"{prefix}norm1.gamma"], p[f"{prefix}norm1.beta"]))
        x = conv2d(x, p[f"{prefix}conv1.weight"], p[f"{prefix}conv1.bias"], pad=1)
        e = linear(emb_act, p[f"{prefix}emb.weight"], p[f"{prefix}emb.bias"])
        x = add(x, reshape(e, (e.shape[0], e.shape[1], 1, 1)))
        x = silu(channel_norm(x, p[f"{prefix}norm2.gamma"], p[f"{prefix}norm2.beta"]))
        x = conv2d(x, p[f"{prefix}conv2.weight"], p[f"{prefix}conv2.bias"], pad=1)
        if f"{prefix}skip.weight" in p:
            h = conv2d(h, p[f"{prefix}skip.weight"], p[f"{prefix}skip.bias"])
        return add(h, x)

    # -- network pieces ------------------------------------------------

    def embed(self, t: np.ndarray, text_emb: np.ndarray, params: Optional[DenoiserParams] = None) -> Tensor:
        """Time embedding plus projected text embedding, (N, time_embed_dim)."""
        p = self.params if params is None else params
        temb = Tensor(timestep_embedding(t, self.config.base_channels))
        h = linear(temb, p["time_embed.0.weight"], p["time_embed.0.bias"])
        h = linear(silu(h), p["time_embed.2.weight"], p["time_embed.2.bias"])
        return add(h, linear(Tensor(text_emb), p["text_proj.weight"], p["text_proj.bias"]))

    def encode(self, x: Tensor, emb: Tensor, params: Optional[DenoiserParams] = None) -> List[Tensor]:
        """Encoder and middle features, one per injection point."""
        p = self.params if params is None else params
        emb_act = silu(emb)
        h = conv2d(x, p["input.conv_in.weight"], p["input.conv_in.bias"], pad=1)
        features = [h]
        for level in range(self.config.levels):
            for block in range(self.config.blocks_per_level):
                h = self._resblock(p, f"input.{level}.{block}.", h, emb_act)
                features.append(h)
            if level < self.config.levels - 1:
                h = avgpool2x(h)
                features.append(h)
        features.append(self._resblock(p, "middle.res.", h, emb_act))
        return features

    def decode(
        self, features: Sequence[Tensor], emb: Tensor, residuals: Optional[Sequence[Tensor]] = None
    ) -> Tensor:
        """Decoder over encoder features, adding ``residuals`` at every injection point."""
        p = self.params
        if residuals is not None:
            if len(residuals) != len(features):
                raise ShapeError("decode", (len(features),), (len(residuals),), detail="residual count")
            features = [add(f, r) for f, r in zip(features, residuals)]
        emb_act = silu(emb)
        skips = list(features[:-1])
        h = features[-1]
        for level in reversed(range(self.config.levels)):
            for block in range(self.config.blocks_per_level + 1):
                h = concat([h, skips.pop()], axis=1)
                h = self._resblock(p, f"output.{level}.{block}.", h, emb_act)
            if level > 0:
                h = upsample_nearest2x(h)
                h = conv2d(h, p[f"output.{level}.up.weight"], p[f"output.{level}.up.bias"], pad=1)
        h = silu(channel_norm(h, p["out.norm.gamma"], p["out.norm.beta"]))
        return conv2d(h, p["out.conv.weight"], p["out.conv.bias"], pad=1)

    # -- public entry points -------------------------------------------

    def base_forward(
        self, x_t: ArrayOrTensor, t: Union[int, np.ndarray], text_emb: np.ndarray
    ) -> Tuple[Tensor, List[Tensor]]:
        """
        Frozen-base noise prediction.

        Args:
            x_t: (N, 3, S, S) noisy images
            t: Timestep per sample (or one for all), >= 1
            text_emb: (N, 64) or (64,) prompt embedding

        Returns:
            (eps_hat shaped like x_t, injection-point features)
        """
        x, steps, text = self._prepare(x_t, t, text_emb)
        emb = self.embed(steps, text)
        features = self.encode(x, emb)
        return self.decode(features, emb), features

    def predict_noise(
        self, x_t: ArrayOrTensor, t: np.ndarray, text_emb: np.ndarray, conditioning: object = None
    ) -> Tensor:
        return self.base_forward(x_t, t, text_emb)[0]


def region_counts(params: ParameterMap) -> Dict[str, int]:
    """Parameter totals for the encoder side and the decoder side."""
    encoder = sum(params[name].data.size for name in encoder_names(params))
    return {"encoder": int(encoder), "decoder": int(params.count() - encoder)}
