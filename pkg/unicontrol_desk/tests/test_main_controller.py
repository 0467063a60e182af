"""
Unit tests for the command-line controller
"""

import io
from pathlib import Path
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from unicontrol_desk.controllers.main_controller import (
    EXIT_ERROR,
    EXIT_FAILURE,
    EXIT_OK,
    MainController,
    _parse_weights,
    read_image_file,
)
from unicontrol_desk.models.checkpoint import load_checkpoint
from unicontrol_desk.models.grad_core import GradcheckEntry, GradcheckReport
from unicontrol_desk.models.records import load_tensor, save_tensor

TINY = str(Path(__file__).resolve().parent.parent / "assets" / "configs" / "tiny.cfg")


@pytest.fixture
def controller():
    """Controller writing reports to a buffer."""
    return MainController(out=io.StringIO())


class TestParsing:
    """Test suite for argument parsing helpers."""

    def test_parse_weights(self):
        """Test the k=v list syntax."""
        assert _parse_weights("depth=0.6, seg=0.4") == {"depth": 0.6, "seg": 0.4}
        with pytest.raises(Exception):
            _parse_weights("depth")

    def test_usage_errors(self, controller):
        """Test that bad usage exits with status 2."""
        assert controller.dispatch([]) == EXIT_ERROR
        assert controller.dispatch(["sample"]) == EXIT_ERROR
        assert controller.dispatch(["datagen", "--count", "x", "--out", "d"]) == EXIT_ERROR

    def test_help(self, controller, capsys):
        """Test that --help exits cleanly."""
        assert controller.dispatch(["--help"]) == EXIT_OK
        assert "datagen" in capsys.readouterr().out

    def test_read_image_file(self, tmp_path):
        """Test raw tensor conditions."""
        path = tmp_path / "cond.tensor"
        save_tensor(path, np.ones((3, 4, 4), dtype=np.float32))
        np.testing.assert_array_equal(read_image_file(str(path)), np.ones((3, 4, 4)))


class TestCommands:
    """Test suite for individual subcommands."""

    def test_params(self, controller):
        """Test the parameter report."""
        assert controller.dispatch(["params", "--config", TINY]) == EXIT_OK
        text = controller.out.getvalue()
        assert "Parameters" in text
        assert "unified model (9 tasks)" in text

    def test_gradcheck_primitives(self, controller):
        """Test the primitive gradient checks."""
        assert controller.dispatch(["gradcheck", "--primitives-only"]) == EXIT_OK
        assert controller.out.getvalue().endswith("all gradient checks passed\n")

    def test_gradcheck_failure_exit_status(self, controller):
        """Test that a failing check exits with status 1."""
        failing = GradcheckReport("conv2d", 1e-4, [GradcheckEntry("w", (2, 2), 4, 0.5)])
        target = "unicontrol_desk.controllers.main_controller.run_gradcheck_suite"
        with patch(target, return_value=[failing]) as suite:
            assert controller.dispatch(["gradcheck", "--primitives-only"]) == EXIT_FAILURE
        suite.assert_called_once()
        assert suite.call_args.kwargs["include_model"] is False
        assert controller.out.getvalue().endswith("FAILED: conv2d\n")

    def test_value_error_maps_to_status_2(self, controller, capsys):
        """Test that a ValueError from a command is reported like a package error."""
        target = "unicontrol_desk.controllers.main_controller.run_gradcheck_suite"
        with patch(target, MagicMock(side_effect=ValueError("bad seed"))):
            assert controller.dispatch(["gradcheck", "--primitives-only"]) == EXIT_ERROR
        assert "bad seed" in capsys.readouterr().err

    def test_datagen(self, controller, tmp_path):
        """Test dataset generation."""
        out = tmp_path / "data"
        argv = ["-q", "datagen", "--count", "2", "--out", str(out), "--tasks", "canny,seg", "--config", TINY]
        assert controller.dispatch(argv) == EXIT_OK
        assert "wrote 4 records" in controller.out.getvalue()
        assert len(list(out.glob("*.ucds"))) == 4

    def test_unknown_task_is_error(self, controller, tmp_path, capsys):
        """Test that package errors map to status 2 with a message."""
        argv = ["datagen", "--count", "1", "--out", str(tmp_path / "d"), "--tasks", "lineart"]
        assert controller.dispatch(argv) == EXIT_ERROR
        assert "error:" in capsys.readouterr().err

    def test_missing_checkpoint(self, controller, tmp_path, capsys):
        """Test that an unreadable checkpoint is reported."""
        argv = [
            "sample", "--ckpt", str(tmp_path / "absent.uckp"), "--prompt", "x",
            "--out", str(tmp_path / "o.ppm"), "--task", "canny", "--cond", str(tmp_path / "c.tensor"),
        ]
        assert controller.dispatch(argv) == EXIT_ERROR
        assert "error:" in capsys.readouterr().err


@pytest.mark.slow
@pytest.mark.integration
class TestPipeline:
    """End-to-end run of the command line on the tiny configuration."""

    @pytest.fixture
    def trained(self, tmp_path):
        """Generate data and train a tiny checkpoint."""
        data, ckpt = tmp_path / "data", tmp_path / "model.uckp"
        controller = MainController(out=io.StringIO())
        argv = ["-q", "datagen", "--count", "3", "--out", str(data), "--tasks", "canny,seg,outpainting,depth,pose"]
        assert controller.dispatch(argv + ["--config", TINY]) == EXIT_OK
        assert controller.dispatch(["-q", "train", "--config", TINY, "--data", str(data), "--out", str(ckpt)]) == 0
        return tmp_path, data, ckpt

    def test_train_outputs(self, trained):
        """Test the checkpoint and its default loss log."""
        tmp_path, _, ckpt = trained
        assert load_checkpoint(ckpt).step == 10
        assert len((tmp_path / "model.loss").read_text().splitlines()) == 10

    def test_sample(self, trained):
        """Test single-task sampling from a dataset record."""
        tmp_path, data, ckpt = trained
        out = tmp_path / "s.ppm"
        argv = [
            "-q", "sample", "--ckpt", str(ckpt), "--prompt", "a red circle", "--out", str(out),
            "--task", "canny", "--cond", str(data / "000000_canny.ucds"), "--steps", "5", "--count", "2",
        ]
        assert MainController(out=io.StringIO()).dispatch(argv) == EXIT_OK
        images = load_tensor(out.with_suffix(".tensor"))
        assert images.shape == (2, 3, 8, 8)
        assert images.min() >= -1.0 and images.max() <= 1.0

    def test_sample_hybrid(self, trained):
        """Test two-source sampling."""
        tmp_path, data, ckpt = trained
        controller = MainController(out=io.StringIO())
        argv = [
            "-q", "sample-hybrid", "--ckpt", str(ckpt), "--prompt", "a person", "--out", str(tmp_path / "h.ppm"),
            "--task-a", "depth", "--cond-a", str(data / "000000_depth.ucds"),
            "--task-b", "pose", "--cond-b", str(data / "000001_pose.ucds"), "--steps", "5",
        ]
        assert controller.dispatch(argv) == EXIT_OK
        assert "depth map and human skeleton to image" in controller.out.getvalue()

    def test_sample_zeroshot(self, trained):
        """Test preset and manual-weight zero-shot sampling."""
        tmp_path, data, ckpt = trained
        common = ["-q", "sample-zeroshot", "--ckpt", str(ckpt), "--prompt", "a scene", "--steps", "5"]
        record = str(data / "000000_seg.ucds")
        preset = common + ["--out", str(tmp_path / "z1.ppm"), "--cond", record, "--preset", "colorization"]
        assert MainController(out=io.StringIO()).dispatch(preset) == EXIT_OK
        manual = common + ["--out", str(tmp_path / "z2.ppm"), "--cond", record, "--weights", "depth=1,seg=1"]
        assert MainController(out=io.StringIO()).dispatch(manual) == EXIT_OK
        bare = common + ["--out", str(tmp_path / "z3.ppm"), "--cond", record]
        assert MainController(out=io.StringIO()).dispatch(bare) == EXIT_ERROR

    def test_eval(self, trained):
        """Test the fidelity report of a trained checkpoint."""
        _, data, ckpt = trained
        controller = MainController(out=io.StringIO())
        argv = ["-q", "eval", "--ckpt", str(ckpt), "--data", str(data), "--task", "seg", "--samples", "2"]
        assert controller.dispatch(argv) == EXIT_OK
        assert "Condition fidelity" in controller.out.getvalue()
