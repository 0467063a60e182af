"""
Unit tests for run configuration documents
"""

from pathlib import Path

import pytest

from unicontrol_desk.models.config import Config, TrainConfig
from unicontrol_desk.models.errors import ConfigError, DatasetError

CONFIGS = Path(__file__).resolve().parent.parent / "assets" / "configs"


class TestConfigParsing:
    """Test suite for Config.parse and Config.load."""

    def test_parse_values(self):
        """Test typed conversion of every value kind."""
        config = Config.parse(
            "# comment\n"
            "base_channels=8\n"
            "channel_mults = 1,2\n"
            "lr=3e-4  # trailing comment\n"
            "tasks=depth,pose\n"
            "hypernet=off\n"
            "\n"
        )
        assert config.base_channels == 8
        assert config.channel_mults == (1, 2)
        assert config.lr == pytest.approx(3e-4)
        assert config.tasks == ("depth", "pose")
        assert config.hypernet is False

    def test_defaults(self):
        """Test that an empty document gives the defaults."""
        config = Config.parse("")
        assert config == Config()
        assert config.guidance_weight == 9.0
        assert config.ddim_steps == 50

    def test_errors(self):
        """Test malformed, unknown, duplicate and badly typed lines."""
        with pytest.raises(ConfigError):
            Config.parse("steps")
        with pytest.raises(ConfigError, match="unknown"):
            Config.parse("learning_rate=1")
        with pytest.raises(ConfigError, match="duplicate"):
            Config.parse("steps=1\nsteps=2")
        with pytest.raises(ConfigError):
            Config.parse("steps=many")
        with pytest.raises(ConfigError):
            Config.parse("moe_adapter=maybe")

    def test_semantic_validation(self):
        """Test cross-field checks."""
        with pytest.raises(ConfigError):
            Config.parse("tasks=lineart")
        with pytest.raises(ConfigError):
            Config.parse("T=10\nddim_steps=20")
        with pytest.raises(ConfigError):
            Config.parse("freeze_frac=1.5")
        with pytest.raises(ConfigError):
            Config.parse("image_size=30")

    def test_text_round_trip(self):
        """Test that to_text parses back to an equal config."""
        config = Config(base_channels=8, tasks=("hed",), moe_adapter=False, lr=2.5e-5)
        assert Config.parse(config.to_text()) == config
        assert Config.from_dict(config.to_dict()) == config

    def test_from_dict_rejects_unknown(self):
        """Test that unknown snapshot keys are refused."""
        with pytest.raises(ConfigError):
            Config.from_dict({"bogus": 1})

    def test_bundled_configs(self):
        """Test the shipped toy and tiny configurations."""
        toy = Config.load(CONFIGS / "toy.cfg")
        assert toy.image_size == 32
        assert toy.tasks == ("canny", "seg", "outpainting")
        tiny = Config.load(CONFIGS / "tiny.cfg")
        assert tiny.image_size == 8
        assert tiny.channel_mults == (1, 2)

    def test_missing_file(self, tmp_path):
        """Test that an unreadable path raises DatasetError."""
        with pytest.raises(DatasetError):
            Config.load(tmp_path / "absent.cfg")


class TestProjections:
    """Test suite for the per-module configs."""

    def test_freeze_step(self):
        """Test that the hypernet freezes at 80% of training."""
        assert Config(steps=2000).train_config().freeze_step == 1600
        assert Config(steps=10, freeze_frac=0.5).train_config().freeze_step == 5

    def test_model_projection(self):
        """Test the U-Net and control projections."""
        config = Config(image_size=16, base_channels=8, adapter_depth=3)
        assert config.unet_config().image_size == 16
        assert config.control_config().num_tasks == 9
        assert config.control_config().adapter_depth == 3
        assert config.datagen_config().canvas_size == 16
        assert config.schedule().T == 200

    def test_guidance_projection(self):
        """Test the sampling defaults."""
        guidance = Config().guidance_config()
        assert (guidance.weight, guidance.steps, guidance.prompt_drop_prob) == (9.0, 50, 0.30)

    def test_train_config_validation(self):
        """Test TrainConfig checks."""
        with pytest.raises(ConfigError):
            TrainConfig(tasks=())
        with pytest.raises(ConfigError):
            TrainConfig(steps=10, freeze_step=11)
        with pytest.raises(ConfigError):
            TrainConfig(drop_prob=2.0)
