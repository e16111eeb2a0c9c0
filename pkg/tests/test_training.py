"""Tests for the focal loss, the Adam optimizer and fold training."""

import csv
import math

import numpy as np
import pytest

from lighttbnet.core.checkpoint import read_checkpoint
from lighttbnet.core.data import stratified_split
from lighttbnet.core.errors import ConfigError, NonFiniteLossError, ShapeError, SplitError
from lighttbnet.core.synthetic import make_toy_arrays
from lighttbnet.core.tensor import Tensor, gradcheck, softmax
from lighttbnet.core.training import (Adam, AdamConfig, AdamState, FocalLossConfig, TrainConfig, Trainer,
                                      adam_step, focal_loss, fold_seed, train_fold)


@pytest.fixture(scope="module")
def toy32():
    records, images = make_toy_arrays(n_pos=20, n_neg=20, size=32, seed=1)
    scaled = {path: pixels / 255.0 for path, pixels in images.items()}
    split = stratified_split(records, test_frac=0.2, seed=0)
    return records, scaled, split


def _source(images):
    return lambda record: images[record.image_path]


class TestFocalLoss:
    """Focal loss values and gradients."""

    def test_gamma_zero_is_cross_entropy(self, float64):
        rng = np.random.default_rng(0)
        for _ in range(10):
            probs = softmax(Tensor(rng.normal(size=(16, 2))), axis=1)
            labels = rng.integers(0, 2, size=16)
            expected = -np.mean(np.log(probs.data[np.arange(16), labels]))
            got = focal_loss(probs, labels, FocalLossConfig(gamma=0.0)).item()
            assert abs(got - expected) < 1e-12

    def test_half_probability_point(self, float64):
        loss = focal_loss(Tensor([[0.5, 0.5]]), [1], FocalLossConfig(gamma=2.0)).item()
        assert abs(loss - 0.25 * math.log(2.0)) < 1e-12
        assert abs(loss - 0.173287) < 1e-6

    def test_focusing_downweights_easy_examples(self, float64):
        probs = Tensor([[0.05, 0.95]])
        assert focal_loss(probs, [1], FocalLossConfig(2.0)).item() < focal_loss(probs, [1], FocalLossConfig(0.0)).item()

    def test_clamped_probability_stays_finite(self, float64):
        loss = focal_loss(Tensor([[1.0, 0.0]]), [1], FocalLossConfig(2.0)).item()
        assert math.isfinite(loss)
        assert loss == pytest.approx(-math.log(1e-7), rel=1e-6)

    def test_gradient(self, float64):
        logits = Tensor(np.random.default_rng(3).normal(size=(5, 2)), requires_grad=True)

        def fn():
            return focal_loss(softmax(logits, axis=1), [0, 1, 1, 0, 1], FocalLossConfig(2.0))

        assert gradcheck(fn, [logits]) < 1e-5

    def test_bad_inputs(self):
        with pytest.raises(ShapeError):
            focal_loss(Tensor([[0.5, 0.5]]), [0, 1])
        with pytest.raises(ConfigError):
            focal_loss(Tensor([[0.5, 0.5]]), [2])
        with pytest.raises(ConfigError):
            FocalLossConfig(gamma=-1.0).validate()


class TestAdam:
    """Adam update rule, bias correction and bookkeeping."""

    def test_first_step_bias_correction(self):
        p = np.array([1.0])
        state = AdamState([p])
        adam_step([p], [np.array([0.5])], state, AdamConfig(lr=1e-4))
        assert state.t == 1
        assert p[0] == pytest.approx(1.0 - 1e-4 * 0.5 / (0.5 + 1e-8), abs=1e-15)

    def test_missing_gradient_skipped(self):
        a, b = np.array([1.0]), np.array([2.0])
        state = AdamState([a, b])
        adam_step([a, b], [None, np.array([1.0])], state)
        assert a[0] == 1.0
        assert b[0] < 2.0
        assert state.t == 1
        assert state.m[0][0] == 0.0

    def test_shape_mismatch(self):
        p = np.zeros(3)
        with pytest.raises(ShapeError):
            adam_step([p], [np.zeros(2)], AdamState([p]))
        with pytest.raises(ShapeError):
            adam_step([p], [], AdamState([p]))

    def test_minimises_quadratic(self, float64):
        w = Tensor([5.0], requires_grad=True)
        optimizer = Adam([w], AdamConfig(lr=0.1))
        history = []
        for _ in range(300):
            optimizer.zero_grad()
            (w * w).sum().backward()
            optimizer.step()
            history.append(abs(float(w.data[0])))
        assert all(history[i + 1] < history[i] for i in range(5))
        assert history[-1] < 0.5
        assert optimizer.t == 300

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            AdamConfig(lr=0.0).validate()
        with pytest.raises(ConfigError):
            AdamConfig(beta1=1.0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=1).validate()
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0).validate()


class TestTrainFold:
    """Training one fold end to end on a tiny model."""

    def test_fold_seeds_differ(self):
        seeds = {fold_seed(0, k) for k in range(5)}
        assert len(seeds) == 5
        assert fold_seed(0, 2) == fold_seed(0, 2)

    def test_single_epoch_selects_epoch_one(self, tiny_config, toy32, tmp_path):
        records, images, split = toy32
        config = TrainConfig(epochs=1, batch_size=8, seed=0)
        checkpoint = train_fold(tiny_config, records, split, _source(images), 0, config, out_dir=tmp_path)
        assert checkpoint.epoch == 1
        assert checkpoint.fold_id == 0
        assert (tmp_path / "fold0.ltbn").is_file()
        with open(tmp_path / "fold0_log.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["epoch", "train_loss", "val_acc", "val_f1", "val_auc"]
        assert len(rows) == 2
        assert read_checkpoint(tmp_path / "fold0.ltbn").metadata()["epoch"] == 1

    def test_selects_best_validation_auc(self, tiny_config, toy32):
        records, images, split = toy32
        trainer = Trainer(tiny_config, records, split, _source(images), 1, TrainConfig(epochs=3, batch_size=8))
        checkpoint = trainer.fit()
        aucs = [(-math.inf if e.val_auc is None else e.val_auc) for e in trainer.history]
        assert len(trainer.history) == 3
        assert checkpoint.epoch == 1 + int(np.argmax(aucs))

    def test_training_is_deterministic(self, tiny_config, toy32):
        records, images, split = toy32
        config = TrainConfig(epochs=2, batch_size=8, seed=5)
        a = train_fold(tiny_config, records, split, _source(images), 2, config)
        b = train_fold(tiny_config, records, split, _source(images), 2, config)
        assert [name for name, _ in a.tensors] == [name for name, _ in b.tensors]
        for (_, x), (_, y) in zip(a.tensors, b.tensors):
            np.testing.assert_array_equal(x, y)

    def test_non_finite_loss_reports_context(self, tiny_config, toy32):
        records, images, split = toy32
        config = TrainConfig(epochs=1, batch_size=8, adam=AdamConfig(lr=1e-3))
        broken = lambda record: np.full((32, 32), np.nan)
        with pytest.raises(NonFiniteLossError) as exc:
            Trainer(tiny_config, records, split, broken, 0, config).fit()
        assert exc.value.epoch == 1
        assert exc.value.batch_index == 0
        assert exc.value.lr == 1e-3

    def test_bad_fold(self, tiny_config, toy32):
        records, images, split = toy32
        with pytest.raises(SplitError):
            Trainer(tiny_config, records, split, _source(images), 5)
