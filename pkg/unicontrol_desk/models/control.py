"""
Control - Task-aware control branch around a frozen base denoiser
Holds the MoE-style adapter bank, the instruction hypernet and the
zero-initialized bridges, and composes them with a trainable copy of the
base encoder:

    eps = decode(encode(x) + Z1(G(x + Z2(c) * H2(instr))) * H1(instr))

Parameter names (one flat map):
    base.*                  frozen base denoiser
    copy.*                  trainable encoder copy G
    adapter.{k}.conv{j}.*   adapter module k ("adapter.shared." when shared)
    hypernet.{i}.*          projection heads, one per injection point and "input"
    zero.{i}.*              1x1 bridges, one per injection point and "input"
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from unicontrol_desk.models.denoiser import (
    ArrayOrTensor,
    UNetConfig,
    UNetDenoiser,
    clone_trainable_copy,
    denoiser_param_shapes,
    init_denoiser,
    truncated_normal,
)
from unicontrol_desk.models.errors import ConfigError, ShapeError
from unicontrol_desk.models.grad_core import (
    ParameterMap,
    Tensor,
    add,
    conv2d,
    linear,
    mul,
    reshape,
    silu,
)
from unicontrol_desk.models.tasks import (
    DEFAULT_REGISTRY,
    EMBED_DIM,
    Conditioning,
    TaskRegistry,
)

logger = logging.getLogger(__name__)

GROUPS: Tuple[str, ...] = ("base", "copy", "adapter", "hypernet", "zero")
INPUT_BRIDGE = "input"
WEIGHT_SUM_TOLERANCE = 1e-6

Modulation = Union[Tensor, np.ndarray, Sequence[float]]


@dataclass(frozen=True)
class ControlConfig:
    """
    Shape and ablation switches of the control branch.

    Attributes:
        num_tasks: Adapter modules K (one per registered task)
        adapter_hidden: Channels of the adapter's hidden convolutions
        adapter_depth: Convolution + SiLU layers per adapter module (2 or 3)
        moe_adapter: False shares one adapter module across all tasks
        hypernet: False leaves every bridge unmodulated
        instruction_dim: Instruction embedding length
    """

    num_tasks: int = 9
    adapter_hidden: int = 16
    adapter_depth: int = 2
    moe_adapter: bool = True
    hypernet: bool = True
    instruction_dim: int = EMBED_DIM

    def __post_init__(self) -> None:
        if self.num_tasks < 1:
            raise ConfigError(f"num_tasks must be >= 1, got {self.num_tasks}")
        if self.adapter_depth not in (2, 3):
            raise ConfigError(f"adapter_depth must be 2 or 3, got {self.adapter_depth}")
        if self.adapter_hidden < 1 or self.instruction_dim < 1:
            raise ConfigError("adapter_hidden and instruction_dim must be >= 1")

    def adapter_modules(self) -> List[str]:
        return [str(k) for k in range(self.num_tasks)] if self.moe_adapter else ["shared"]


def adapter_layer_shapes(unet: UNetConfig, control: ControlConfig) -> List[Tuple[int, int]]:
    """(out, in) channel pairs of one adapter module's 3x3 convolutions."""
    hidden = control.adapter_hidden
    widths = [unet.in_channels] + [hidden] * (control.adapter_depth - 1) + [unet.base_channels]
    return [(widths[i + 1], widths[i]) for i in range(control.adapter_depth)]


def control_param_shapes(
    unet: UNetConfig, control: ControlConfig
) -> "OrderedDict[str, Tuple[int, ...]]":
    """Names and shapes of every parameter outside base.* and copy.*."""
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    for module in control.adapter_modules():
        for j, (cout, cin) in enumerate(adapter_layer_shapes(unet, control), start=1):
            shapes[f"adapter.{module}.conv{j}.weight"] = (cout, cin, 3, 3)
            shapes[f"adapter.{module}.conv{j}.bias"] = (cout,)

    channels = unet.injection_channels()
    if control.hypernet:
        for i, c in enumerate(channels):
            shapes[f"hypernet.{i}.weight"] = (c, control.instruction_dim)
            shapes[f"hypernet.{i}.bias"] = (c,)
        shapes[f"hypernet.{INPUT_BRIDGE}.weight"] = (unet.base_channels, control.instruction_dim)
        shapes[f"hypernet.{INPUT_BRIDGE}.bias"] = (unet.base_channels,)

    shapes[f"zero.{INPUT_BRIDGE}.weight"] = (unet.in_channels, unet.base_channels, 1, 1)
    shapes[f"zero.{INPUT_BRIDGE}.bias"] = (unet.in_channels,)
    for i, c in enumerate(channels):
        shapes[f"zero.{i}.weight"] = (c, c, 1, 1)
        shapes[f"zero.{i}.bias"] = (c,)
    return shapes


def _control_initial_value(name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.startswith("zero."):
        return np.zeros(shape, dtype=np.float32)
    if name.startswith("hypernet.") and name.endswith(".bias"):
        return np.ones(shape, dtype=np.float32)
    if name.endswith(".weight"):
        return truncated_normal(rng, shape)
    return np.zeros(shape, dtype=np.float32)


def modulated_zero_conv(
    features: Tensor, weight: Tensor, bias: Tensor, modulation: Optional[Modulation] = None
) -> Tensor:
    """
    1x1 convolution whose kernel is scaled per input channel.

    The effective kernel is weight[o, i] * modulation[i]; the bias is not
    modulated. ``None`` applies the plain convolution.

    Raises:
        ShapeError: modulation length differs from the input channel count
    """
    if modulation is None:
        return conv2d(features, weight, bias)
    m = modulation if isinstance(modulation, Tensor) else Tensor(modulation)
    cin = weight.shape[1]
    if m.shape != (cin,):
        raise ShapeError("modulated_zero_conv", m.shape, (cin,), detail="modulation vs input channels")
    scaled = mul(weight, reshape(m, (1, cin, 1, 1)))
    return conv2d(features, scaled, bias)


class UniControlModel:
    """
    Frozen base denoiser plus the task-aware control branch.

    All parameters live in one ParameterMap; the per-group views are taken
    on every call so optimizer updates to the map are always visible.
    """

    def __init__(
        self,
        unet_config: UNetConfig,
        control_config: ControlConfig,
        params: ParameterMap,
        registry: TaskRegistry = DEFAULT_REGISTRY,
    ) -> None:
        if control_config.num_tasks != len(registry):
            raise ConfigError(
                f"control branch has {control_config.num_tasks} adapters but the registry "
                f"lists {len(registry)} tasks"
            )
        self.unet_config = unet_config
        self.control_config = control_config
        self.params = params
        self.registry = registry

    # -- construction --------------------------------------------------

    @classmethod
    def from_state(
        cls,
        unet_config: UNetConfig,
        control_config: ControlConfig,
        arrays: Mapping[str, np.ndarray],
        frozen: Sequence[str] = (),
        registry: TaskRegistry = DEFAULT_REGISTRY,
    ) -> "UniControlModel":
        """
        Rebuild a model from stored arrays.

        Raises:
            ShapeError: a parameter is missing, unexpected or misshapen
        """
        expected = expected_param_shapes(unet_config, control_config)
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise ShapeError(
                "from_state", (len(expected),), (len(arrays),),
                detail=f"missing {missing[:3]} unexpected {extra[:3]}",
            )
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != shape:
                raise ShapeError("from_state", shape, arrays[name].shape, detail=name)
        params = ParameterMap.from_arrays({name: arrays[name] for name in expected}, frozen=frozen)
        return cls(unet_config, control_config, params, registry)

    def with_parameters(self, tensors: Mapping[str, Tensor]) -> "UniControlModel":
        """Same architecture over caller-owned tensors (identity preserved)."""
        return UniControlModel(
            self.unet_config, self.control_config, ParameterMap.wrap(tensors), self.registry
        )

    # -- parameter views -----------------------------------------------

    def group(self, name: str) -> ParameterMap:
        if name not in GROUPS:
            raise KeyError(f"unknown parameter group: {name!r}")
        return self.params.subset(f"{name}.")

    def group_names(self, name: str) -> List[str]:
        if name not in GROUPS:
            raise KeyError(f"unknown parameter group: {name!r}")
        return [key for key in self.params if key.startswith(f"{name}.")]

    def group_counts(self) -> Dict[str, int]:
        return {name: self.group(name).count() for name in GROUPS}

    def adapter_module_count(self) -> int:
        """Parameters of a single adapter module."""
        module = self.control_config.adapter_modules()[0]
        return self.params.subset(f"adapter.{module}.").count()

    def base_denoiser(self) -> UNetDenoiser:
        return UNetDenoiser(self.unet_config, self.group("base"))

    # -- adapter -------------------------------------------------------

    def _module_name(self, task_index: int) -> str:
        if not 0 <= task_index < self.control_config.num_tasks:
            raise IndexError(
                f"task index {task_index} out of range [0, {self.control_config.num_tasks})"
            )
        return str(task_index) if self.control_config.moe_adapter else "shared"

    def _condition_tensor(self, cond_image: ArrayOrTensor) -> Tensor:
        x = cond_image if isinstance(cond_image, Tensor) else Tensor(cond_image)
        if x.data.ndim == 3:
            x = reshape(x, (1,) + x.shape)
        c, s = self.unet_config.in_channels, self.unet_config.image_size
        if x.data.ndim != 4 or x.shape[1:] != (c, s, s):
            raise ShapeError("condition image", x.shape, (c, s, s))
        return x

    def adapter_forward(self, cond_image: ArrayOrTensor, task_index: int) -> Tensor:
        """
        Output of adapter module ``task_index`` only.

        Args:
            cond_image: (3, S, S) or (N, 3, S, S) condition in [0, 1]
            task_index: Adapter index in [0, K)

        Returns:
            (N, base_channels, S, S) features; N is 1 for an unbatched input

        Raises:
            IndexError: task index out of range
        """
        prefix = f"adapter.{self._module_name(int(task_index))}."
        h = self._condition_tensor(cond_image)
        for j in range(1, self.control_config.adapter_depth + 1):
            h = silu(
                conv2d(h, self.params[f"{prefix}conv{j}.weight"], self.params[f"{prefix}conv{j}.bias"], pad=1)
            )
        return h

    def mix_adapters(self, cond_image: ArrayOrTensor, weights: Sequence[float]) -> Tensor:
        """Unnormalized sum of weights[i] * adapter_forward(cond_image, i)."""
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (self.control_config.num_tasks,):
            raise ShapeError("mix_adapters", w.shape, (self.control_config.num_tasks,))
        out: Optional[Tensor] = None
        for index, value in enumerate(w):
            if value == 0.0:
                continue
            term = self.adapter_forward(cond_image, index)
            if value != 1.0:
                term = mul(term, Tensor(value))
            out = term if out is None else add(out, term)
        if out is None:
            x = self._condition_tensor(cond_image)
            s = self.unet_config.image_size
            return Tensor(np.zeros((x.shape[0], self.unet_config.base_channels, s, s)))
        return out

    def blend_adapters(self, cond_image: ArrayOrTensor, weights: Sequence[float]) -> Tensor:
        """
        Convex combination of adapter outputs.

        Raises:
            ValueError: weights negative or not summing to 1 within 1e-6
        """
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (self.control_config.num_tasks,):
            raise ShapeError("blend_adapters", w.shape, (self.control_config.num_tasks,))
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ValueError(f"adapter weights must be finite and nonnegative, got {w}")
        if abs(float(w.sum()) - 1.0) > WEIGHT_SUM_TOLERANCE:
            raise ValueError(f"adapter weights must sum to 1, got {w.sum():.8f}")
        return self.mix_adapters(cond_image, w)

    def condition_features(self, conditioning: Conditioning) -> Tensor:
        """Mean over sources of each source's adapter blend."""
        blends = [self.blend_adapters(src.image, src.weights) for src in conditioning.sources]
        total = blends[0]
        for blend in blends[1:]:
            total = add(total, blend)
        if len(blends) > 1:
            total = mul(total, Tensor(1.0 / len(blends)))
        return total

    # -- hypernet and bridges -----------------------------------------

    def _instruction_tensor(self, instr_embedding: np.ndarray) -> Tensor:
        e = np.asarray(instr_embedding)
        dim = self.control_config.instruction_dim
        if e.shape != (dim,):
            raise ShapeError("hypernet", e.shape, (dim,), detail="instruction embedding")
        return Tensor(e.reshape(1, dim))

    def _project(self, e: Tensor, head: Union[int, str]) -> Tensor:
        p = self.params
        out = linear(e, p[f"hypernet.{head}.weight"], p[f"hypernet.{head}.bias"])
        return reshape(out, (out.shape[1],))

    def hyper_modulations(self, instr_embedding: np.ndarray) -> List[Tensor]:
        """
        One modulation vector per output bridge, lengths = injection channels.

        Raises:
            ShapeError: embedding is not (instruction_dim,)
            ConfigError: the hypernet is switched off
        """
        if not self.control_config.hypernet:
            raise ConfigError("hypernet is disabled for this model")
        e = self._instruction_tensor(instr_embedding)
        return [self._project(e, i) for i in range(self.unet_config.injection_count)]

    def input_modulation(self, instr_embedding: np.ndarray) -> Tensor:
        """Modulation of the input bridge Z2, length base_channels."""
        if not self.control_config.hypernet:
            raise ConfigError("hypernet is disabled for this model")
        return self._project(self._instruction_tensor(instr_embedding), INPUT_BRIDGE)

    def modulated_zero_conv(
        self, features: Tensor, layer_index: Union[int, str], modulation: Optional[Modulation]
    ) -> Tensor:
        """Apply bridge ``layer_index`` (an injection point or "input") with its kernel modulated."""
        key = f"zero.{layer_index}"
        if f"{key}.weight" not in self.params:
            raise IndexError(f"no zero convolution named {key!r}")
        return modulated_zero_conv(
            features, self.params[f"{key}.weight"], self.params[f"{key}.bias"], modulation
        )

    # -- forward -------------------------------------------------------

    def base_forward(self, x_t: ArrayOrTensor, t: Union[int, np.ndarray], text_emb: np.ndarray) -> Tensor:
        return self.base_denoiser().base_forward(x_t, t, text_emb)[0]

    def predict_noise(
        self,
        x_t: ArrayOrTensor,
        t: Union[int, np.ndarray],
        text_emb: np.ndarray,
        conditioning: Optional[Conditioning] = None,
    ) -> Tensor:
        """
        Controlled noise prediction; null conditioning runs the base alone.

        Returns:
            (N, 3, S, S) noise estimate
        """
        base = self.base_denoiser()
        x, steps, text = base._prepare(x_t, t, text_emb)
        emb = base.embed(steps, text)
        features = base.encode(x, emb)
        if conditioning is None or conditioning.is_null:
            return base.decode(features, emb)

        c = self.condition_features(conditioning)
        if self.control_config.hypernet:
            modulations: List[Optional[Tensor]] = list(self.hyper_modulations(conditioning.instruction))
            input_mod: Optional[Tensor] = self.input_modulation(conditioning.instruction)
        else:
            modulations = [None] * self.unet_config.injection_count
            input_mod = None

        copy = self.group("copy")
        x_control = add(x, self.modulated_zero_conv(c, INPUT_BRIDGE, input_mod))
        copy_emb = base.embed(steps, text, params=copy)
        control_features = base.encode(x_control, copy_emb, params=copy)
        residuals = [
            self.modulated_zero_conv(g, i, m)
            for i, (g, m) in enumerate(zip(control_features, modulations))
        ]
        return base.decode(features, emb, residuals)

    def controlled_denoise(
        self,
        x_t: ArrayOrTensor,
        t: Union[int, np.ndarray],
        text_emb: np.ndarray,
        cond_image: np.ndarray,
        task: str,
    ) -> Tensor:
        """
        Single-task controlled noise prediction.

        Raises:
            UnknownTaskError: task is not registered
        """
        return self.predict_noise(x_t, t, text_emb, Conditioning.single(task, cond_image, self.registry))


def expected_param_shapes(
    unet: UNetConfig, control: ControlConfig
) -> "OrderedDict[str, Tuple[int, ...]]":
    """Full parameter table: base, copy and control branch."""
    base = denoiser_param_shapes(unet)
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    for name, shape in base.items():
        shapes[f"base.{name}"] = shape
    for name, shape in base.items():
        if name.startswith(("time_embed.", "text_proj.", "input.", "middle.")):
            shapes[f"copy.{name}"] = shape
    shapes.update(control_param_shapes(unet, control))
    return shapes


def init_unicontrol(
    unet: UNetConfig,
    control: ControlConfig,
    seed: int,
    base: Optional[ParameterMap] = None,
    registry: TaskRegistry = DEFAULT_REGISTRY,
) -> UniControlModel:
    """
    Fresh model: the base (given or randomly initialized) frozen, the copy
    cloned from it, adapters and hypernet weights truncated-normal,
    hypernet biases one, every bridge zero.
    """
    base_params = base if base is not None else init_denoiser(unet, seed)
    copy_params = clone_trainable_copy(base_params)
    rng = np.random.default_rng([seed, 1])

    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, tensor in base_params.items():
        arrays[f"base.{name}"] = tensor.data.astype(np.float32, copy=True)
    for name, tensor in copy_params.items():
        arrays[f"copy.{name}"] = tensor.data
    for name, shape in control_param_shapes(unet, control).items():
        arrays[name] = _control_initial_value(name, shape, rng)

    frozen = [name for name in arrays if name.startswith("base.")]
    model = UniControlModel.from_state(unet, control, arrays, frozen=frozen, registry=registry)
    logger.debug("initialized control model: %s", model.group_counts())
    return model
