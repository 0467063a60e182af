"""
Unit tests for the task-aware control branch
"""

import numpy as np
import pytest

from unicontrol_desk.models.checks import TINY_CONFIG
from unicontrol_desk.models.control import (
    ControlConfig,
    UniControlModel,
    control_param_shapes,
    expected_param_shapes,
    init_unicontrol,
    modulated_zero_conv,
)
from unicontrol_desk.models.denoiser import init_denoiser, truncated_normal
from unicontrol_desk.models.errors import ConfigError, ShapeError, UnknownTaskError
from unicontrol_desk.models.grad_core import Graph, Tensor, backward, mse
from unicontrol_desk.models.tasks import DEFAULT_REGISTRY, Conditioning, TaskRegistry, encode_text

UNET = TINY_CONFIG.unet_config()
CONTROL = TINY_CONFIG.control_config()
S = UNET.image_size


def randomize_bridges(model, seed=0, std=0.1):
    """Give every zero convolution small random values."""
    rng = np.random.default_rng(seed)
    for name in model.group_names("zero"):
        model.params.assign(name, truncated_normal(rng, model.params[name].shape, std=std))


def gradients_after_step(model, conditioning, seed=0):
    """Run one loss/backward pass and return the parameter map."""
    rng = np.random.default_rng(seed)
    x_t = rng.standard_normal((2, 3, S, S)).astype(np.float32)
    target = rng.standard_normal((2, 3, S, S)).astype(np.float32)
    with Graph() as graph:
        eps = model.predict_noise(Tensor(x_t), np.array([3, 11]), encode_text("a red circle"), conditioning)
        loss = mse(eps, Tensor(target))
    backward(graph, loss)
    return model.params


def is_zero(grad):
    return grad is None or not np.any(grad)


class TestControlConfig:
    """Test suite for ControlConfig."""

    def test_defaults(self):
        """Test the default switches."""
        config = ControlConfig()
        assert config.num_tasks == 9
        assert config.adapter_depth == 2
        assert config.adapter_modules() == [str(k) for k in range(9)]

    def test_shared_adapter(self):
        """Test that disabling the MoE adapter leaves one module."""
        assert ControlConfig(moe_adapter=False).adapter_modules() == ["shared"]

    def test_validation(self):
        """Test rejected settings."""
        with pytest.raises(ConfigError):
            ControlConfig(num_tasks=0)
        with pytest.raises(ConfigError):
            ControlConfig(adapter_depth=4)
        with pytest.raises(ConfigError):
            ControlConfig(adapter_hidden=0)


class TestParameterLayout:
    """Test suite for parameter shapes and initialization."""

    @pytest.fixture
    def model(self):
        """Create a freshly initialized tiny model."""
        return init_unicontrol(UNET, CONTROL, seed=0)

    def test_groups_partition_parameters(self, model):
        """Test that the five groups cover every parameter exactly once."""
        counts = model.group_counts()
        assert sum(counts.values()) == model.params.count()
        assert counts["base"] > counts["copy"] > 0

    def test_bridge_and_head_count(self, model):
        """Test one bridge and one head per injection point plus the input ones."""
        bridges = {name.split(".")[1] for name in model.group_names("zero")}
        heads = {name.split(".")[1] for name in model.group_names("hypernet")}
        expected = {str(i) for i in range(UNET.injection_count)} | {"input"}
        assert bridges == expected
        assert heads == expected

    def test_initial_values(self, model):
        """Test zero bridges, unit hypernet biases and a frozen base."""
        for name in model.group_names("zero"):
            assert not model.params[name].data.any()
        np.testing.assert_array_equal(model.params["hypernet.0.bias"].data, 1.0)
        assert all(not model.params[name].requires_grad for name in model.group_names("base"))
        assert all(model.params[name].requires_grad for name in model.group_names("copy"))

    def test_copy_starts_equal_to_base(self, model):
        """Test that the trainable copy is cloned from the base encoder."""
        for name in model.group_names("copy"):
            suffix = name[len("copy.") :]
            np.testing.assert_array_equal(model.params[name].data, model.params[f"base.{suffix}"].data)
            assert model.params[name].data is not model.params[f"base.{suffix}"].data

    def test_given_base_is_used(self):
        """Test initialization around a pretrained base."""
        base = init_denoiser(UNET, seed=42)
        model = init_unicontrol(UNET, CONTROL, seed=0, base=base)
        np.testing.assert_array_equal(model.params["base.out.conv.weight"].data, base["out.conv.weight"].data)

    def test_expected_shapes(self, model):
        """Test the full table against the initialized map."""
        shapes = expected_param_shapes(UNET, CONTROL)
        assert list(shapes) == list(model.params)
        assert shapes["zero.input.weight"] == (3, UNET.base_channels, 1, 1)
        assert shapes["adapter.4.conv1.weight"] == (CONTROL.adapter_hidden, 3, 3, 3)

    def test_ablation_shapes(self):
        """Test the shared-adapter and hypernet-free layouts."""
        shapes = control_param_shapes(UNET, ControlConfig(moe_adapter=False, hypernet=False))
        assert not any(name.startswith("hypernet.") for name in shapes)
        assert {name.split(".")[1] for name in shapes if name.startswith("adapter.")} == {"shared"}
        deep = control_param_shapes(UNET, ControlConfig(adapter_depth=3))
        assert "adapter.0.conv3.weight" in deep

    def test_from_state_validation(self, model):
        """Test that missing or misshapen arrays are rejected."""
        arrays = model.params.arrays()
        del arrays["zero.0.bias"]
        with pytest.raises(ShapeError):
            UniControlModel.from_state(UNET, CONTROL, arrays)
        arrays = model.params.arrays()
        arrays["zero.0.bias"] = np.zeros(99, dtype=np.float32)
        with pytest.raises(ShapeError):
            UniControlModel.from_state(UNET, CONTROL, arrays)

    def test_registry_size_must_match(self, model):
        """Test that the adapter count follows the registry."""
        small = TaskRegistry([DEFAULT_REGISTRY.get("hed")])
        with pytest.raises(ConfigError):
            UniControlModel(UNET, CONTROL, model.params, registry=small)


class TestZeroInitialization:
    """Test suite for the untrained control branch."""

    @pytest.fixture
    def model(self):
        """Create a freshly initialized tiny model."""
        return init_unicontrol(UNET, CONTROL, seed=3)

    def test_controlled_equals_base_bitwise(self, model):
        """Test that zero bridges leave the base prediction unchanged."""
        rng = np.random.default_rng(0)
        x_t = rng.standard_normal((2, 3, S, S)).astype(np.float32)
        cond = rng.random((2, 3, S, S)).astype(np.float32)
        text = encode_text("a blue square")
        base = model.base_forward(x_t, np.array([5, 9]), text)
        controlled = model.controlled_denoise(x_t, np.array([5, 9]), text, cond, "depth")
        np.testing.assert_array_equal(controlled.data, base.data)

    def test_only_output_bridges_learn_first(self, model):
        """Test gradient gating: zero bridges block every upstream gradient."""
        cond = Conditioning.single("seg", np.random.default_rng(1).random((3, S, S)))
        params = gradients_after_step(model, cond)
        assert any(np.any(params[n].grad) for n in model.group_names("zero") if not n.startswith("zero.input"))
        for group in ("copy", "adapter", "hypernet"):
            for name in model.group_names(group):
                assert is_zero(params[name].grad), name
        assert is_zero(params["zero.input.weight"].grad)
        for name in model.group_names("base"):
            assert params[name].grad is None

    def test_null_condition_runs_base(self, model):
        """Test that the null condition skips the control branch."""
        randomize_bridges(model)
        x_t = np.random.default_rng(2).standard_normal((1, 3, S, S)).astype(np.float32)
        out = model.predict_noise(x_t, 4, np.zeros(64), Conditioning.null())
        np.testing.assert_array_equal(out.data, model.base_forward(x_t, 4, np.zeros(64)).data)


class TestRouting:
    """Test suite for adapter routing and blending."""

    @pytest.fixture
    def model(self):
        """Create a tiny model with live bridges."""
        model = init_unicontrol(UNET, CONTROL, seed=1)
        randomize_bridges(model, seed=1)
        return model

    @pytest.fixture
    def cond(self):
        """Create one condition map."""
        return np.random.default_rng(5).random((3, S, S)).astype(np.float32)

    def test_single_task_touches_one_adapter(self, model, cond):
        """Test that only the routed adapter module receives gradient."""
        params = gradients_after_step(model, Conditioning.single("canny", cond))
        k = DEFAULT_REGISTRY.index_of("canny")
        assert np.any(params[f"adapter.{k}.conv1.weight"].grad)
        for other in range(CONTROL.num_tasks):
            if other != k:
                assert is_zero(params[f"adapter.{other}.conv1.weight"].grad)
        assert np.any(params["copy.input.conv_in.weight"].grad)
        assert np.any(params["hypernet.0.weight"].grad)

    def test_adapter_output_shape(self, model, cond):
        """Test the adapter feature layout."""
        assert model.adapter_forward(cond, 0).shape == (1, UNET.base_channels, S, S)
        assert model.adapter_forward(np.stack([cond, cond]), 0).shape == (2, UNET.base_channels, S, S)
        with pytest.raises(IndexError):
            model.adapter_forward(cond, CONTROL.num_tasks)
        with pytest.raises(ShapeError):
            model.adapter_forward(np.zeros((3, S + 2, S + 2)), 0)

    def test_blend_is_linear(self, model, cond):
        """Test that a blend equals the weighted sum of adapter outputs."""
        weights = np.zeros(CONTROL.num_tasks)
        weights[[1, 3]] = [0.25, 0.75]
        blended = model.blend_adapters(cond, weights).data
        expected = 0.25 * model.adapter_forward(cond, 1).data + 0.75 * model.adapter_forward(cond, 3).data
        np.testing.assert_allclose(blended, expected, rtol=1e-5, atol=1e-7)

    def test_one_hot_blend_is_adapter(self, model, cond):
        """Test that a one-hot blend is bitwise the routed adapter."""
        blended = model.blend_adapters(cond, DEFAULT_REGISTRY.one_hot("pose")).data
        np.testing.assert_array_equal(blended, model.adapter_forward(cond, 5).data)

    def test_blend_validation(self, model, cond):
        """Test weight checks."""
        with pytest.raises(ValueError):
            model.blend_adapters(cond, np.full(CONTROL.num_tasks, 0.5))
        negative = np.zeros(CONTROL.num_tasks)
        negative[[0, 1]] = [1.5, -0.5]
        with pytest.raises(ValueError):
            model.blend_adapters(cond, negative)
        with pytest.raises(ShapeError):
            model.blend_adapters(cond, [1.0])

    def test_mix_all_zero(self, model, cond):
        """Test that an all-zero mix yields zero features."""
        out = model.mix_adapters(cond, np.zeros(CONTROL.num_tasks))
        assert out.shape == (1, UNET.base_channels, S, S)
        assert not out.data.any()

    def test_hybrid_is_mean_of_sources(self, model, cond):
        """Test that two sources average their adapter features."""
        other = np.flip(cond, axis=-1).copy()
        conditioning = Conditioning(
            sources=Conditioning.single("depth", cond).sources + Conditioning.single("pose", other).sources,
            instruction=encode_text("depth map and human skeleton to image"),
        )
        features = model.condition_features(conditioning).data
        expected = 0.5 * (model.adapter_forward(cond, 3).data + model.adapter_forward(other, 5).data)
        np.testing.assert_allclose(features, expected, rtol=1e-5, atol=1e-7)

    def test_shared_adapter_ignores_task(self, cond):
        """Test that a shared adapter gives every task the same features."""
        model = init_unicontrol(UNET, ControlConfig(adapter_hidden=4, moe_adapter=False), seed=0)
        np.testing.assert_array_equal(model.adapter_forward(cond, 0).data, model.adapter_forward(cond, 8).data)

    def test_unknown_task(self, model, cond):
        """Test that controlled_denoise rejects unknown tasks."""
        with pytest.raises(UnknownTaskError):
            model.controlled_denoise(np.zeros((1, 3, S, S)), 1, np.zeros(64), cond, "lineart")


class TestHypernet:
    """Test suite for instruction modulation of the bridges."""

    def test_worked_example(self):
        """Test weight 0.5, modulation 3 and feature 2 giving 3.0."""
        features = Tensor(np.full((1, 1, 2, 2), 2.0))
        out = modulated_zero_conv(features, Tensor(np.full((1, 1, 1, 1), 0.5)), Tensor([0.0]), [3.0])
        np.testing.assert_allclose(out.data, 3.0)

    def test_bias_not_modulated(self):
        """Test that modulation scales the kernel only."""
        features = Tensor(np.ones((1, 2, 1, 1)))
        weight = Tensor(np.ones((1, 2, 1, 1)))
        out = modulated_zero_conv(features, weight, Tensor([10.0]), [0.0, 0.0])
        np.testing.assert_allclose(out.data, 10.0)

    def test_modulation_length_checked(self):
        """Test that modulation must match the input channels."""
        with pytest.raises(ShapeError):
            modulated_zero_conv(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones((1, 2, 1, 1))), Tensor([0.0]), [1.0])

    def test_modulation_lengths(self):
        """Test one vector per injection point with matching lengths."""
        model = init_unicontrol(UNET, CONTROL, seed=0)
        mods = model.hyper_modulations(encode_text("canny edge to image"))
        assert [m.shape[0] for m in mods] == UNET.injection_channels()
        assert model.input_modulation(encode_text("x")).shape == (UNET.base_channels,)
        with pytest.raises(ShapeError):
            model.hyper_modulations(np.zeros(3))

    def test_null_instruction_gives_unit_modulation(self):
        """Test that the zero embedding leaves only the unit biases."""
        model = init_unicontrol(UNET, CONTROL, seed=0)
        for m in model.hyper_modulations(np.zeros(64, dtype=np.float32)):
            np.testing.assert_array_equal(m.data, 1.0)

    def test_instruction_changes_output(self):
        """Test that different instructions steer the same condition differently."""
        model = init_unicontrol(UNET, CONTROL, seed=0)
        randomize_bridges(model)
        cond = np.random.default_rng(0).random((3, S, S))
        x_t = np.random.default_rng(1).standard_normal((1, 3, S, S))
        weights = DEFAULT_REGISTRY.one_hot("canny")
        a = model.predict_noise(x_t, 5, np.zeros(64), Conditioning.blended(cond, weights, "canny edge to image"))
        b = model.predict_noise(x_t, 5, np.zeros(64), Conditioning.blended(cond, weights, "image outpainting"))
        assert not np.array_equal(a.data, b.data)

    def test_disabled_hypernet(self):
        """Test the hypernet-free ablation."""
        model = init_unicontrol(UNET, ControlConfig(adapter_hidden=4, hypernet=False), seed=0)
        with pytest.raises(ConfigError):
            model.hyper_modulations(np.zeros(64))
        randomize_bridges(model)
        out = model.controlled_denoise(np.zeros((1, 3, S, S)), 2, np.zeros(64), np.ones((3, S, S)), "hed")
        assert out.shape == (1, 3, S, S)

    def test_missing_bridge(self):
        """Test that an unknown bridge name raises IndexError."""
        model = init_unicontrol(UNET, CONTROL, seed=0)
        with pytest.raises(IndexError):
            model.modulated_zero_conv(Tensor(np.ones((1, 4, 2, 2))), 99, None)
