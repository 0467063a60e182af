"""
Checks - Gradient-check suites
Builders for every primitive and for the controlled denoiser on a tiny
configuration. Each builder maps a seed to (parameters, loss_fn) as
expected by :func:`gradcheck`.
"""

import logging
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from unicontrol_desk.models.config import Config
from unicontrol_desk.models.control import init_unicontrol
from unicontrol_desk.models.denoiser import truncated_normal
from unicontrol_desk.models.grad_core import (
    Builder,
    GradcheckReport,
    Tensor,
    add,
    avgpool2x,
    channel_norm,
    concat,
    conv2d,
    gradcheck,
    linear,
    mse,
    mul,
    reshape,
    silu,
    sum_all,
    upsample_nearest2x,
)
from unicontrol_desk.models.tasks import Conditioning, encode_text

logger = logging.getLogger(__name__)

TINY_CONFIG = Config(
    image_size=8,
    base_channels=4,
    channel_mults=(1, 2),
    time_embed_dim=8,
    adapter_hidden=4,
    T=20,
    ddim_steps=5,
    steps=10,
    batch_size=2,
)
BRIDGE_STD = 0.1


def _leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _unary(shape: Tuple[int, ...], fn: Callable[[Tensor], Tensor]) -> Builder:
    def build(seed: int):
        rng = np.random.default_rng(seed)
        params = {"x": _leaf(rng, *shape)}
        weights = Tensor(rng.standard_normal(fn(Tensor(params["x"].data)).shape))
        return params, lambda p: sum_all(mul(fn(p["x"]), weights))

    return build


def _binary(
    a_shape: Tuple[int, ...], b_shape: Tuple[int, ...], fn: Callable[[Tensor, Tensor], Tensor]
) -> Builder:
    def build(seed: int):
        rng = np.random.default_rng(seed)
        params = {"a": _leaf(rng, *a_shape), "b": _leaf(rng, *b_shape)}
        out_shape = fn(Tensor(params["a"].data), Tensor(params["b"].data)).shape
        weights = Tensor(rng.standard_normal(out_shape))
        return params, lambda p: sum_all(mul(fn(p["a"], p["b"]), weights))

    return build


def _conv_builder(stride: int, pad: int) -> Builder:
    def build(seed: int):
        rng = np.random.default_rng(seed)
        params = {"x": _leaf(rng, 2, 3, 6, 6), "kernel": _leaf(rng, 4, 3, 3, 3), "bias": _leaf(rng, 4)}
        ho = (6 + 2 * pad - 3) // stride + 1
        weights = Tensor(rng.standard_normal((2, 4, ho, ho)))

        def loss(p):
            return sum_all(mul(conv2d(p["x"], p["kernel"], p["bias"], stride=stride, pad=pad), weights))

        return params, loss

    return build


def _linear_builder(seed: int):
    rng = np.random.default_rng(seed)
    params = {"x": _leaf(rng, 3, 5), "weight": _leaf(rng, 4, 5), "bias": _leaf(rng, 4)}
    weights = Tensor(rng.standard_normal((3, 4)))
    return params, lambda p: sum_all(mul(linear(p["x"], p["weight"], p["bias"]), weights))


def _norm_builder(seed: int):
    rng = np.random.default_rng(seed)
    params = {"x": _leaf(rng, 2, 3, 4, 4), "gamma": _leaf(rng, 3), "beta": _leaf(rng, 3)}
    weights = Tensor(rng.standard_normal((2, 3, 4, 4)))
    return params, lambda p: sum_all(mul(channel_norm(p["x"], p["gamma"], p["beta"]), weights))


def _mse_builder(seed: int):
    rng = np.random.default_rng(seed)
    params = {"x": _leaf(rng, 2, 3, 4), "y": _leaf(rng, 2, 3, 4)}
    return params, lambda p: mse(p["x"], p["y"])


def _concat_builder(seed: int):
    rng = np.random.default_rng(seed)
    params = {"a": _leaf(rng, 2, 2, 3, 3), "b": _leaf(rng, 2, 3, 3, 3)}
    weights = Tensor(rng.standard_normal((2, 5, 3, 3)))
    return params, lambda p: sum_all(mul(concat([p["a"], p["b"]], axis=1), weights))


def primitive_builders() -> Dict[str, Builder]:
    """One builder per primitive (and per conv2d stride/pad variant)."""
    return {
        "conv2d": _conv_builder(1, 0),
        "conv2d pad=1": _conv_builder(1, 1),
        "conv2d stride=2 pad=1": _conv_builder(2, 1),
        "linear": _linear_builder,
        "silu": _unary((3, 4), silu),
        "channel_norm": _norm_builder,
        "add broadcast": _binary((2, 3, 4), (3, 1), add),
        "mul broadcast": _binary((2, 3, 4), (1, 4), mul),
        "upsample_nearest2x": _unary((1, 2, 3, 3), upsample_nearest2x),
        "avgpool2x": _unary((1, 2, 4, 4), avgpool2x),
        "mse": _mse_builder,
        "sum_all": _unary((2, 3), sum_all),
        "concat": _concat_builder,
        "reshape": _unary((2, 6), lambda x: reshape(x, (3, 4))),
    }


def controlled_denoise_builder(config: Config = TINY_CONFIG, task: str = "canny", batch: int = 2) -> Builder:
    """
    Full-model builder: mse(controlled_denoise, target) over every
    trainable tensor. Bridges get small random values so the copy, adapter
    and hypernet paths carry nonzero gradients.
    """

    def build(seed: int):
        model = init_unicontrol(config.unet_config(), config.control_config(), seed)
        rng = np.random.default_rng([seed, 3])
        for name in model.group_names("zero"):
            model.params.assign(name, truncated_normal(rng, model.params[name].shape, std=BRIDGE_STD))
        s = config.image_size
        x_t = rng.standard_normal((batch, 3, s, s))
        target = rng.standard_normal((batch, 3, s, s))
        cond = rng.random((batch, 3, s, s))
        t = rng.integers(1, config.T + 1, size=batch)
        text = encode_text("a red circle on a gray background")
        conditioning = Conditioning.single(task, cond, model.registry)
        params = {name: model.params[name] for name in model.params}

        def loss(p):
            eps = model.with_parameters(p).predict_noise(Tensor(x_t), t, text, conditioning)
            return mse(eps, Tensor(target))

        return params, loss

    return build


def run_gradcheck_suite(
    seed: int = 0,
    config: Config = TINY_CONFIG,
    max_entries: Optional[int] = 4,
    include_model: bool = True,
    tolerance: float = 1e-4,
) -> List[GradcheckReport]:
    """Check every primitive exhaustively, then the tiny controlled denoiser."""
    reports = [
        gradcheck(builder, seed, tolerance=tolerance, title=name)
        for name, builder in primitive_builders().items()
    ]
    if include_model:
        reports.append(
            gradcheck(
                controlled_denoise_builder(config),
                seed,
                tolerance=tolerance,
                max_entries=max_entries,
                title="controlled_denoise",
            )
        )
    for report in reports:
        verdict = "ok" if report.passed else "FAIL"
        logger.info("gradcheck %s: worst %.3e (%s)", report.title, report.worst, verdict)
    return reports
