import math

import numpy as np
import pytest

from attenlab.errors import ContractError, InputError, NumericError
from attenlab.model import ModelConfig, StageSpec, build
from attenlab.synth import synth_generate
from attenlab.tensor import Tensor
from attenlab.training import (
    Adam,
    TrainConfig,
    adam_step,
    augment,
    flip,
    lr_schedule,
    preprocess,
    resize_bilinear,
    train,
)


def adam_reference(theta, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam with bias correction, written out longhand."""
    m = v = 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        path.append(theta)
    return path


def disc_or_ring(ring, size=8, radius=2.5):
    """Flip-invariant 8-bit toy image: a centred bright disc or a bright ring."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    d = np.hypot(yy - size / 2, xx - size / 2)
    on = np.abs(d - radius) < 1 if ring else d < radius
    v = np.where(on, 220, 40).astype(np.uint8)
    return np.repeat(v[:, :, None], 3, axis=2)


class TestResize:
    def test_same_size_is_identity(self):
        img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3))
        np.testing.assert_array_equal(resize_bilinear(img, 5, 7), img)

    def test_constant_stays_constant(self):
        np.testing.assert_allclose(resize_bilinear(np.full((4, 6), 3.0), 9, 5), 3.0, atol=1e-12)

    def test_downsample_by_two_averages_pairs(self):
        img = np.arange(16.0).reshape(4, 4)
        out = resize_bilinear(img, 2, 2)
        expected = img.reshape(2, 2, 2, 2).mean(axis=(1, 3))
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_zero_area(self):
        with pytest.raises(InputError):
            resize_bilinear(np.zeros((0, 3)), 2, 2)


class TestPreprocess:
    def test_constant_image_gives_zeros(self):
        out = preprocess(np.full((10, 10, 3), 77, dtype=np.uint8), 8)
        np.testing.assert_array_equal(out, 0.0)

    def test_zscore_per_channel(self):
        img = np.random.default_rng(1).integers(0, 256, size=(20, 30, 3)).astype(np.uint8)
        out = preprocess(img, 16)
        assert out.shape == (16, 16, 3)
        assert np.max(np.abs(out.mean(axis=(0, 1)))) <= 1e-9
        np.testing.assert_allclose(out.std(axis=(0, 1)), 1.0, atol=1e-6)

    def test_rejects_gray(self):
        with pytest.raises(InputError):
            preprocess(np.zeros((4, 4)), 4)


class TestAugment:
    def test_double_flip_is_involution(self):
        img = np.random.default_rng(2).integers(0, 256, size=(6, 5, 3))
        np.testing.assert_array_equal(flip(flip(img, True, True), True, True), img)

    def test_flip_directions(self):
        img = np.arange(6).reshape(2, 3, 1)
        np.testing.assert_array_equal(flip(img, True, False)[:, :, 0], [[2, 1, 0], [5, 4, 3]])
        np.testing.assert_array_equal(flip(img, False, True)[:, :, 0], [[3, 4, 5], [0, 1, 2]])

    def test_seeded_sequence_reproducible(self):
        img = np.arange(12).reshape(2, 2, 3)
        a = [augment(img, r) for r in [np.random.default_rng(5)] for _ in range(20)]
        b = [augment(img, r) for r in [np.random.default_rng(5)] for _ in range(20)]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_flip_rates(self):
        img = np.array([[0, 1], [2, 3]]).reshape(2, 2, 1)
        rng = np.random.default_rng(6)
        h = v = 0
        for _ in range(10_000):
            out = augment(img, rng)[:, :, 0]
            h += out[0, 0] in (1, 3)
            v += out[0, 0] in (2, 3)
        assert abs(h / 10_000 - 0.5) <= 0.02
        assert abs(v / 10_000 - 0.5) <= 0.02


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        for g in (3.7, -0.02, 1e-3):
            p = Tensor(np.array([0.0]), requires_grad=True)
            adam_step([p], [np.array([g])], Adam([p]), lr=0.005)
            expected = 0.005 * abs(g) / (abs(g) + 1e-8)
            assert abs(abs(p.data[0]) - expected) <= 1e-15
            assert np.sign(p.data[0]) == -np.sign(g)

    def test_zero_gradient_advances_time_only(self):
        p = Tensor(np.array([1.5]), requires_grad=True)
        state = Adam([p])
        adam_step([p], [np.array([0.0])], state, lr=0.1)
        assert p.data[0] == 1.5
        assert state.t == 1

    def test_quadratic_descent_matches_reference(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = Adam([p])
        path = []
        for _ in range(50):
            adam_step([p], [2 * p.data], state, lr=0.1)
            path.append(p.data[0])
        np.testing.assert_allclose(path, adam_reference(1.0, lambda t: 2 * t, 0.1, 50), rtol=0, atol=1e-12)
        assert abs(path[-1]) < 1.0

    def test_non_finite_gradient_leaves_parameters(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        state = Adam([p])
        with pytest.raises(NumericError):
            adam_step([p], [np.array([np.nan, 0.0])], state, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        assert state.t == 0


class TestLRSchedule:
    def test_flat_history_halves_after_fourth_epoch(self):
        lr = 0.005
        lrs = []
        hist = []
        for acc in [0.5, 0.5, 0.5, 0.5]:
            hist.append(acc)
            lr = lr_schedule(hist, lr, patience=3, factor=0.5)
            lrs.append(lr)
        assert lrs == [0.005, 0.005, 0.005, 0.0025]

    def test_increasing_never_reduces(self):
        hist = list(np.linspace(0.1, 0.9, 30))
        assert all(lr_schedule(hist[: i + 1], 0.005) == 0.005 for i in range(30))

    def test_two_stagnation_windows(self):
        lr = 0.005
        hist = []
        for acc in [0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6]:
            hist.append(acc)
            lr = lr_schedule(hist, lr)
        assert lr == 0.00125

    def test_improvement_resets_wait(self):
        lr = 0.005
        hist = []
        for acc in [0.5, 0.5, 0.5, 0.6, 0.6, 0.6]:
            hist.append(acc)
            lr = lr_schedule(hist, lr)
        assert lr == 0.005

    def test_empty_history(self):
        with pytest.raises(ContractError):
            lr_schedule([], 0.005)


def toy_model(classes=2, size=8):
    return build(ModelConfig(
        input_size=size,
        stages=(StageSpec(1, 4), StageSpec(1, 8)),
        head_widths=(16, 8, classes),
        num_classes=classes,
    ))


class TestTrain:
    def test_separable_toy_set(self):
        images = [disc_or_ring(False), disc_or_ring(True)]
        history = train(toy_model(), images, [0, 1], TrainConfig(epochs=30, batch_size=2))
        assert len(history) == 30
        assert history.train_acc[-1] == 1.0

    def test_same_seed_same_history(self):
        images = [disc_or_ring(False, radius=r) for r in (2.0, 3.0)] + [disc_or_ring(True, radius=r) for r in (2.0, 3.0)]
        cfg = TrainConfig(epochs=3, batch_size=3)
        a = train(toy_model(), images, [0, 0, 1, 1], cfg)
        b = train(toy_model(), images, [0, 0, 1, 1], cfg)
        assert a.train_loss == b.train_loss
        assert a.lr == b.lr

    def test_loss_decreases_on_synthetic_task(self):
        ds = synth_generate(8, seed=3)
        history = train(toy_model(classes=4, size=32), ds.pixels, ds.labels, TrainConfig(epochs=6, batch_size=8))
        assert history.train_loss[-1] < history.train_loss[0]

    def test_history_csv(self, tmp_path):
        history = train(toy_model(), [disc_or_ring(False), disc_or_ring(True)], [0, 1], TrainConfig(epochs=2))
        history.write_csv(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,lr,train_loss,train_acc"
        assert len(lines) == 3

    def test_empty_dataset(self):
        with pytest.raises(InputError):
            train(toy_model(), [], [], TrainConfig(epochs=1))

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            train(toy_model(), [disc_or_ring(False)], [5], TrainConfig(epochs=1))
