"""
Unit tests for multi-task training and parameter accounting
"""

import dataclasses
import io

import numpy as np
import pytest

from unicontrol_desk.models.checks import TINY_CONFIG
from unicontrol_desk.models.control import expected_param_shapes, init_unicontrol
from unicontrol_desk.models.datagen import Dataset, generate_sample
from unicontrol_desk.models.errors import DatasetError, ShapeError
from unicontrol_desk.models.trainer import (
    Trainer,
    base_from_checkpoint,
    count_params,
    model_from_checkpoint,
    pretrain,
    sample_task,
    train,
)

TASKS = ("canny", "seg", "outpainting")


def tiny_dataset(tasks=TASKS, scenes=4):
    """In-memory dataset of a few 8x8 scenes."""
    config = TINY_CONFIG.datagen_config()
    return Dataset.from_samples([generate_sample(seed, tasks, config) for seed in range(scenes)], tasks)


class TestSampleTask:
    """Test suite for uniform task sampling."""

    def test_uniform(self):
        """Test that every index is drawn about equally often."""
        rng = np.random.default_rng(0)
        counts = np.bincount([sample_task(rng, 3) for _ in range(9000)], minlength=3)
        assert counts.sum() == 9000
        assert np.all(np.abs(counts - 3000) <= 300)

    def test_bad_count(self):
        """Test that K must be positive."""
        with pytest.raises(ValueError):
            sample_task(np.random.default_rng(0), 0)


class TestTrainer:
    """Test suite for the training loop."""

    @pytest.fixture
    def dataset(self):
        """Create the tiny dataset."""
        return tiny_dataset()

    @pytest.fixture
    def trainer(self, dataset):
        """Create a trainer over a fresh tiny model."""
        model = init_unicontrol(TINY_CONFIG.unet_config(), TINY_CONFIG.control_config(), seed=0)
        return Trainer(
            model, TINY_CONFIG.train_config(), TINY_CONFIG.schedule(), dataset, loss_log=io.StringIO()
        )

    def test_batch(self, trainer):
        """Test minibatch layout and routing."""
        batch = trainer.make_batch("seg")
        assert batch.images.shape == (2, 3, 8, 8)
        assert batch.text_emb.shape == (2, 64)
        assert batch.tasks == ("seg", "seg")
        source = batch.conditioning.sources[0]
        assert source.image.shape == (2, 3, 8, 8)
        np.testing.assert_array_equal(source.weights, trainer.model.registry.one_hot("seg"))

    def test_run(self, trainer):
        """Test that every step logs a finite loss for a configured task."""
        losses = trainer.run()
        assert len(losses) == 10
        assert [step for step, _, _ in losses] == list(range(10))
        assert all(task in TASKS for _, task, _ in losses)
        assert all(np.isfinite(value) for _, _, value in losses)

    def test_loss_log_format(self, trainer):
        """Test the step<TAB>task<TAB>loss lines."""
        trainer.run(3)
        lines = trainer.loss_log.getvalue().splitlines()
        assert len(lines) == 3
        step, task, loss = lines[0].split("\t")
        assert step == "0" and task in TASKS
        assert float(loss) == trainer.losses[0][2]

    def test_hypernet_freezes_at_eighty_percent(self, trainer):
        """Test that hypernet tensors freeze from the freeze step on."""
        flags = []
        snapshots = {}

        def record(step, task, loss):
            flags.append(trainer.hypernet_frozen)
            if step == 8:
                for name in trainer.model.group_names("hypernet"):
                    snapshots[name] = trainer.model.params[name].data.copy()

        trainer.on_step.append(record)
        trainer.run()
        assert trainer.config.freeze_step == 8
        assert flags == [False] * 8 + [True] * 2
        for name, before in snapshots.items():
            np.testing.assert_array_equal(trainer.model.params[name].data, before)

    def test_base_never_changes(self, trainer):
        """Test that the frozen base is untouched by training."""
        before = {n: trainer.model.params[n].data.copy() for n in trainer.model.group_names("base")}
        trainer.run(4)
        for name, array in before.items():
            np.testing.assert_array_equal(trainer.model.params[name].data, array)

    def test_bridges_learn_first(self, trainer):
        """Test that gating holds for the first update and opens after it."""
        seen = {0: {}, 1: {}}

        def inspect(step, task, params):
            seen[step].update({name: params[name].grad for name in params})

        trainer.on_gradients.append(inspect)
        trainer.train_step()
        trainer.train_step()
        model = trainer.model
        first, second = seen[0], seen[1]
        assert any(np.any(first[n]) for n in model.group_names("zero"))
        for name in model.group_names("copy") + model.group_names("hypernet"):
            assert first[name] is not None and not np.any(first[name]), name
        assert all(second[n] is not None for n in model.group_names("copy"))
        assert any(np.any(second[n]) for n in model.group_names("copy"))
        assert any(np.any(second[n]) for n in model.group_names("hypernet"))

    def test_unrouted_adapters_untouched(self):
        """Test that adapters of tasks never sampled keep their initial values."""
        config = dataclasses.replace(TINY_CONFIG, tasks=("canny",))
        model = init_unicontrol(config.unet_config(), config.control_config(), seed=0)
        canny = model.registry.index_of("canny")
        others = [
            name
            for name in model.group_names("adapter")
            if not name.startswith(f"adapter.{canny}.")
        ]
        before = {name: model.params[name].data.copy() for name in others}
        trainer = Trainer(model, config.train_config(), config.schedule(), tiny_dataset(("canny",)))
        trainer.run(3)
        assert others
        for name, array in before.items():
            np.testing.assert_array_equal(model.params[name].data, array, err_msg=name)

    def test_missing_task_records(self):
        """Test that a configured task without records is refused."""
        model = init_unicontrol(TINY_CONFIG.unet_config(), TINY_CONFIG.control_config(), seed=0)
        with pytest.raises(DatasetError):
            Trainer(model, TINY_CONFIG.train_config(), TINY_CONFIG.schedule(), tiny_dataset(("canny",)))


class TestTrainEntryPoints:
    """Test suite for train, pretrain and checkpoint rebuilding."""

    def test_pretraining_continues_step_numbers(self, tmp_path):
        """Test that base pretraining and control training share one loss log."""
        config = dataclasses.replace(TINY_CONFIG, base_steps=3, steps=4)
        log = tmp_path / "run.loss"
        checkpoint = train(config, tiny_dataset(), loss_log=log)
        lines = [line.split("\t") for line in log.read_text().splitlines()]
        assert [int(step) for step, _, _ in lines] == list(range(7))
        assert [task for _, task, _ in lines[:3]] == ["base"] * 3
        assert checkpoint.step == 4

    def test_checkpoint_rebuilds_model(self):
        """Test that a training checkpoint restores config, tensors and frozen set."""
        checkpoint = train(TINY_CONFIG, tiny_dataset())
        config, model = model_from_checkpoint(checkpoint)
        assert config == TINY_CONFIG
        assert set(model.group_names("base")) <= model.params.frozen
        assert set(model.group_names("hypernet")) <= model.params.frozen
        for name, array in checkpoint.tensors.items():
            np.testing.assert_array_equal(model.params[name].data, array)

    def test_deterministic(self):
        """Test that one seed and dataset give identical checkpoints."""
        dataset = tiny_dataset()
        a = train(TINY_CONFIG, dataset)
        b = train(TINY_CONFIG, dataset)
        assert a.to_bytes() == b.to_bytes()

    def test_pretrain_checkpoint_feeds_training(self):
        """Test base loading from pretraining and full checkpoints."""
        config = dataclasses.replace(TINY_CONFIG, base_steps=2)
        base_ckpt = pretrain(config, tiny_dataset())
        assert not any(name.startswith("base.") for name in base_ckpt.tensors)
        base = base_from_checkpoint(base_ckpt, config.unet_config())
        checkpoint = train(config, tiny_dataset(), base=base)
        np.testing.assert_array_equal(
            checkpoint.tensors["base.out.conv.weight"], base_ckpt.tensors["out.conv.weight"]
        )
        again = base_from_checkpoint(checkpoint, config.unet_config())
        np.testing.assert_array_equal(again["out.conv.weight"].data, base["out.conv.weight"].data)

    def test_base_shape_mismatch(self):
        """Test that a base for another network is refused."""
        base_ckpt = pretrain(dataclasses.replace(TINY_CONFIG, base_steps=1), tiny_dataset())
        wider = dataclasses.replace(TINY_CONFIG, base_channels=8).unet_config()
        with pytest.raises(ShapeError):
            base_from_checkpoint(base_ckpt, wider)

    def test_empty_dataset(self):
        """Test that training needs records."""
        with pytest.raises(DatasetError):
            train(TINY_CONFIG, Dataset([]))


class TestParamTable:
    """Test suite for parameter accounting."""

    @pytest.fixture
    def model(self):
        """Create the tiny model."""
        return init_unicontrol(TINY_CONFIG.unet_config(), TINY_CONFIG.control_config(), seed=0)

    def test_counts_match_shapes(self, model):
        """Test every total against products of the declared shapes."""
        shapes = expected_param_shapes(TINY_CONFIG.unet_config(), TINY_CONFIG.control_config())

        def total(prefix):
            return sum(int(np.prod(shape)) for name, shape in shapes.items() if name.startswith(prefix))

        table = count_params(model)
        base, copy, zero = total("base."), total("copy."), total("zero.")
        module = total("adapter.0.")
        assert table.base == base
        assert table.control == copy + zero
        assert table.adapter_module == module
        assert table.hypernet == total("hypernet.")
        assert table.unified == sum(int(np.prod(shape)) for shape in shapes.values())
        assert table.stacked == 9 * (base + copy + zero + module)
        assert table.multi_controlnet == base + 9 * (copy + zero + module)
        assert table.task_specific == 8 * module + table.hypernet

    def test_unified_beats_stacked(self, model):
        """Test that sharing the base is cheaper than stacking models."""
        table = count_params(model)
        assert table.unified < table.multi_controlnet < table.stacked
        assert len(table.rows) == 4 + 9
