"""
Unit tests for the toy U-Net denoiser
"""

import numpy as np
import pytest

from unicontrol_desk.models.denoiser import (
    ENCODER_PREFIXES,
    UNetConfig,
    UNetDenoiser,
    clone_trainable_copy,
    denoiser_param_shapes,
    encoder_names,
    init_denoiser,
    region_counts,
    timestep_embedding,
    truncated_normal,
)
from unicontrol_desk.models.errors import ConfigError, ShapeError
from unicontrol_desk.models.grad_core import Tensor

TINY = UNetConfig(image_size=8, base_channels=4, channel_mults=(1, 2), time_embed_dim=8)


class TestUNetConfig:
    """Test suite for UNetConfig."""

    def test_default_injection_points(self):
        """Test the feature layout of the default three-level network."""
        config = UNetConfig()
        assert config.injection_channels() == [32, 32, 32, 64, 64, 128, 128]
        assert config.injection_count == 7

    def test_tiny_injection_points(self):
        """Test the feature layout of the two-level test network."""
        assert TINY.injection_channels() == [4, 4, 4, 8, 8]

    def test_validation(self):
        """Test rejected configurations."""
        with pytest.raises(ConfigError):
            UNetConfig(image_size=10, channel_mults=(1, 2, 4))
        with pytest.raises(ConfigError):
            UNetConfig(channel_mults=())
        with pytest.raises(ConfigError):
            UNetConfig(base_channels=0)
        with pytest.raises(ConfigError):
            UNetConfig(time_embed_dim=1)


class TestParameters:
    """Test suite for parameter shapes and initialization."""

    def test_init_matches_shapes(self):
        """Test that every initialized tensor has its declared shape."""
        shapes = denoiser_param_shapes(TINY)
        params = init_denoiser(TINY, seed=0)
        assert list(params) == list(shapes)
        for name, shape in shapes.items():
            assert params[name].shape == shape
        assert params.count() == sum(int(np.prod(s)) for s in shapes.values())

    def test_init_values(self):
        """Test norm scales, biases and weight spread."""
        params = init_denoiser(UNetConfig(), seed=1)
        np.testing.assert_array_equal(params["out.norm.gamma"].data, 1.0)
        np.testing.assert_array_equal(params["input.conv_in.bias"].data, 0.0)
        weights = params["input.0.0.conv1.weight"].data
        assert np.abs(weights).max() <= 0.04
        assert weights.std() == pytest.approx(0.02 * 0.88, rel=0.1)

    def test_truncated_normal_bounds(self):
        """Test the two-sigma truncation."""
        values = truncated_normal(np.random.default_rng(0), (1000,), std=1.0)
        assert values.dtype == np.float32
        assert np.abs(values).max() <= 2.0

    def test_seed_reproducible(self):
        """Test that one seed gives identical parameters."""
        a, b = init_denoiser(TINY, 5), init_denoiser(TINY, 5)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_clone_owns_arrays(self):
        """Test that the trainable copy holds encoder tensors by value."""
        base = init_denoiser(TINY, 0)
        copy = clone_trainable_copy(base)
        assert list(copy) == encoder_names(base)
        assert all(name.startswith(ENCODER_PREFIXES) for name in copy)
        for name in copy:
            np.testing.assert_array_equal(copy[name].data, base[name].data)
            assert copy[name].data is not base[name].data
            assert copy[name].requires_grad

    def test_region_counts(self):
        """Test that encoder and decoder totals add up."""
        params = init_denoiser(TINY, 0)
        counts = region_counts(params)
        assert counts["encoder"] + counts["decoder"] == params.count()
        assert counts["encoder"] > 0 and counts["decoder"] > 0


class TestForward:
    """Test suite for the denoiser forward pass."""

    @pytest.fixture
    def net(self):
        """Create a tiny denoiser."""
        return UNetDenoiser(TINY, init_denoiser(TINY, 0))

    @pytest.fixture
    def x_t(self):
        """Create a batch of noisy inputs."""
        return np.random.default_rng(0).standard_normal((2, 3, 8, 8)).astype(np.float32)

    def test_output_shape(self, net, x_t):
        """Test that eps_hat matches x_t and features match the layout."""
        eps, features = net.base_forward(x_t, np.array([1, 7]), np.zeros((2, 64)))
        assert eps.shape == x_t.shape
        assert [f.shape[1] for f in features] == TINY.injection_channels()
        assert features[-1].shape[2:] == (4, 4)

    def test_text_broadcast(self, net, x_t):
        """Test that one text embedding serves the whole batch."""
        text = np.random.default_rng(1).standard_normal(64)
        a = net.predict_noise(x_t, 3, text)
        b = net.predict_noise(x_t, np.array([3, 3]), np.stack([text, text]))
        np.testing.assert_array_equal(a.data, b.data)

    def test_zero_residuals_are_identity(self, net, x_t):
        """Test that adding zero residuals leaves the output bitwise unchanged."""
        x = Tensor(x_t)
        steps = np.array([2, 9])
        emb = net.embed(steps, np.zeros((2, 64), dtype=np.float32))
        features = net.encode(x, emb)
        zeros = [Tensor(np.zeros(f.shape, dtype=np.float32)) for f in features]
        np.testing.assert_array_equal(net.decode(features, emb).data, net.decode(features, emb, zeros).data)

    def test_residual_count_checked(self, net, x_t):
        """Test that decode needs one residual per feature."""
        x = Tensor(x_t)
        emb = net.embed(np.array([1, 1]), np.zeros((2, 64), dtype=np.float32))
        features = net.encode(x, emb)
        with pytest.raises(ShapeError):
            net.decode(features, emb, features[:-1])

    def test_input_validation(self, net, x_t):
        """Test shape and timestep checks."""
        with pytest.raises(ShapeError):
            net.predict_noise(np.zeros((1, 3, 4, 4)), 1, np.zeros(64))
        with pytest.raises(ShapeError):
            net.predict_noise(x_t, 1, np.zeros(10))
        with pytest.raises(ValueError):
            net.predict_noise(x_t, 0, np.zeros(64))

    def test_timestep_embedding(self):
        """Test the sinusoidal layout at t = 0."""
        emb = timestep_embedding(np.array([0, 5]), 6)
        assert emb.shape == (2, 6)
        np.testing.assert_array_equal(emb[0], [1, 1, 1, 0, 0, 0])
        assert timestep_embedding(np.array([1]), 5).shape == (1, 5)
