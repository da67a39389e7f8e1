"""Schedule, Adam, balanced sampling, and single/ensemble training loops."""

import datetime as dt

import numpy as np
import pytest

from irrseg.compositing import CompositeStack
from irrseg.geodata import IRRIGATED, RasterGrid, UNCULTIVATED, UNIRRIGATED
from irrseg.training import (
    AdamState,
    BalancedBatchSampler,
    SampleTile,
    TrainConfig,
    TrainingSet,
    adam_step,
    balanced_batch_sampler,
    build_training_set,
    draw_subset,
    ensemble_member_config,
    lr_schedule,
    train_ensemble,
    train_model,
)
from irrseg.unet import UNetConfig


def toy_tile(cls, rng, size=8, channels=4):
    """Tile whose features are linearly separable by class."""
    feats = rng.standard_normal((channels, size, size)).astype(np.float32) * 0.1
    feats[cls - 1] += 2.0  # class signature channel
    labels = np.full((size, size), cls, dtype=np.uint8)
    counts = {IRRIGATED: 0, UNIRRIGATED: 0, UNCULTIVATED: 0}
    counts[cls] = size * size
    return SampleTile(feats, labels, counts)


def toy_dataset(rng, per_class=4, size=8, channels=4):
    tiles = []
    for cls in (IRRIGATED, UNIRRIGATED, UNCULTIVATED):
        tiles.extend(toy_tile(cls, rng, size, channels) for _ in range(per_class))
    return TrainingSet(tiles=tiles)


class TestLrSchedule:
    def test_paper_values(self):
        cfg = TrainConfig()
        assert lr_schedule(0, cfg) == pytest.approx(0.001)
        assert lr_schedule(24_999, cfg) == pytest.approx(0.001)
        assert lr_schedule(25_000, cfg) == pytest.approx(0.0004)
        assert lr_schedule(50_000, cfg) == pytest.approx(0.00016)

    def test_no_decay_degenerate(self):
        cfg = TrainConfig(decay_factor=1.0)
        assert lr_schedule(100_000, cfg) == pytest.approx(0.001)

    def test_non_increasing_piecewise_constant(self):
        cfg = TrainConfig(decay_interval=10, decay_factor=0.5, initial_lr=1.0)
        values = [lr_schedule(s, cfg) for s in range(45)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        for s in range(44):
            changed = values[s + 1] != values[s]
            assert changed == ((s + 1) % 10 == 0)


class TestAdam:
    def test_zero_gradient_no_motion(self):
        cfg = TrainConfig()
        params = {"w": np.array([1.5, -2.0], dtype=np.float32)}
        grads = {"w": np.zeros(2, dtype=np.float32)}
        out = adam_step(params, grads, AdamState(), 0.1, cfg)
        assert np.array_equal(out["w"], params["w"])

    def test_first_step_magnitude(self):
        cfg = TrainConfig()
        params = {"w": np.array([0.0], dtype=np.float32)}
        grads = {"w": np.array([0.37], dtype=np.float32)}
        out = adam_step(params, grads, AdamState(), lr=0.01, config=cfg)
        # bias-corrected first step is lr * g/(|g| + eps) ~= lr, sign opposite g
        assert out["w"][0] == pytest.approx(-0.01, rel=1e-4)

    def test_quadratic_descent(self):
        cfg = TrainConfig()
        state = AdamState()
        w = np.array([1.0], dtype=np.float32)
        history = [abs(float(w[0]))]
        for _ in range(10):
            g = 2.0 * w
            w = adam_step({"w": w}, {"w": g}, state, 0.1, cfg)["w"]
            history.append(abs(float(w[0])))
        assert all(a > b for a, b in zip(history, history[1:]))

    def test_non_finite_gradient_identified(self):
        cfg = TrainConfig()
        with pytest.raises(ValueError, match="bad_tensor"):
            adam_step(
                {"bad_tensor": np.zeros(1, dtype=np.float32)},
                {"bad_tensor": np.array([np.nan], dtype=np.float32)},
                AdamState(), 0.1, cfg,
            )


class TestBalancedSampler:
    def test_batch25_dominant_counts(self):
        rng = np.random.default_rng(0)
        ds = toy_dataset(rng)
        batch = balanced_batch_sampler(ds, 25, np.random.default_rng(1))
        counts = sorted(
            sum(1 for t in batch if t.dominant_class() == c)
            for c in (IRRIGATED, UNIRRIGATED, UNCULTIVATED)
        )
        assert counts == [8, 8, 9]

    def test_batch3_one_per_class(self):
        rng = np.random.default_rng(0)
        ds = toy_dataset(rng)
        batch = balanced_batch_sampler(ds, 3, np.random.default_rng(2))
        assert {t.dominant_class() for t in batch} == {IRRIGATED, UNIRRIGATED, UNCULTIVATED}

    def test_fixed_seed_reproducible(self):
        rng = np.random.default_rng(0)
        ds = toy_dataset(rng)
        s1 = BalancedBatchSampler(ds, np.random.default_rng(7))
        s2 = BalancedBatchSampler(ds, np.random.default_rng(7))
        for _ in range(5):
            b1, b2 = s1.sample(10), s2.sample(10)
            assert all(x is y for x, y in zip(b1, b2))

    def test_missing_class_listed(self):
        rng = np.random.default_rng(0)
        tiles = [toy_tile(IRRIGATED, rng), toy_tile(UNIRRIGATED, rng)]
        with pytest.raises(ValueError, match="uncultivated"):
            BalancedBatchSampler(TrainingSet(tiles=tiles), np.random.default_rng(0))

    def test_long_run_frequency(self):
        rng = np.random.default_rng(0)
        ds = toy_dataset(rng)
        sampler = BalancedBatchSampler(ds, np.random.default_rng(3))
        tally = {IRRIGATED: 0, UNIRRIGATED: 0, UNCULTIVATED: 0}
        for _ in range(1000):
            for t in sampler.sample(25):
                tally[t.dominant_class()] += 1
        total = sum(tally.values())
        for c, n in tally.items():
            assert abs(n / total - 1 / 3) < 0.02


class TestTrainModel:
    def small_configs(self, steps=200):
        tc = TrainConfig(total_steps=steps, batch_size=6, initial_lr=0.003,
                         decay_interval=10_000, weight_decay=1e-4, seed=5)
        mc = UNetConfig(in_channels=4, num_classes=3, base_filters=2, depth=1, seed=11)
        return tc, mc

    def test_loss_decreases_on_separable_data(self):
        rng = np.random.default_rng(17)
        ds = toy_dataset(rng)
        tc, mc = self.small_configs(200)
        model, trace = train_model(ds, tc, mc, log_every=10)
        assert trace[-1].loss < trace[0].loss

    def test_loss_halves_within_500_steps(self):
        rng = np.random.default_rng(23)
        ds = toy_dataset(rng)
        tc, mc = self.small_configs(500)
        _, trace = train_model(ds, tc, mc, log_every=25)
        assert trace[-1].loss <= 0.5 * trace[0].loss

    def test_zero_steps_untouched(self):
        rng = np.random.default_rng(19)
        ds = toy_dataset(rng)
        tc, mc = self.small_configs(0)
        model, trace = train_model(ds, tc, mc)
        from irrseg.unet import UNet
        fresh = UNet(mc)
        for name, arr in fresh.named_params().items():
            assert np.array_equal(arr, model.named_params()[name])
        assert trace == []

    def test_same_seed_bit_identical(self):
        rng = np.random.default_rng(29)
        ds = toy_dataset(rng)
        tc, mc = self.small_configs(30)
        m1, _ = train_model(ds, tc, mc)
        m2, _ = train_model(ds, tc, mc)
        for name, arr in m1.named_params().items():
            assert np.array_equal(arr, m2.named_params()[name]), name


class TestTrainEnsemble:
    def test_size_one_full_fraction_matches_train_model(self):
        rng = np.random.default_rng(31)
        ds = toy_dataset(rng)
        tc = TrainConfig(total_steps=20, batch_size=3, ensemble_size=1,
                         subset_fraction=1.0, seed=2)
        mc = UNetConfig(in_channels=4, num_classes=3, base_filters=2, depth=1, seed=40)
        [(member, _)] = train_ensemble(ds, tc, mc)
        solo, _ = train_model(ds, tc, ensemble_member_config(mc, 1))
        for name, arr in member.named_params().items():
            assert np.array_equal(arr, solo.named_params()[name]), name

    def test_members_differ(self):
        rng = np.random.default_rng(37)
        ds = toy_dataset(rng)
        tc = TrainConfig(total_steps=10, batch_size=3, ensemble_size=2,
                         subset_fraction=0.8, seed=3)
        mc = UNetConfig(in_channels=4, num_classes=3, base_filters=2, depth=1, seed=50)
        (m1, _), (m2, _) = train_ensemble(ds, tc, mc)
        same = all(
            np.array_equal(m1.named_params()[n], m2.named_params()[n])
            for n in m1.named_params()
        )
        assert not same

    def test_subsets_reproducible(self):
        rng = np.random.default_rng(41)
        ds = toy_dataset(rng, per_class=6)
        a = draw_subset(ds, 0.5, seed=9)
        b = draw_subset(ds, 0.5, seed=9)
        assert all(x is y for x, y in zip(a.tiles, b.tiles))
        c = draw_subset(ds, 0.5, seed=10)
        assert not all(x is y for x, y in zip(a.tiles, c.tiles))

    def test_subset_losing_class_rejected(self):
        # one tile per class: any strict subset loses a class
        rng = np.random.default_rng(43)
        ds = toy_dataset(rng, per_class=1)
        tc = TrainConfig(total_steps=1, batch_size=3, ensemble_size=3,
                         subset_fraction=0.34, seed=4)
        mc = UNetConfig(in_channels=4, num_classes=3, base_filters=2, depth=1)
        with pytest.raises(ValueError, match="lost class"):
            train_ensemble(ds, tc, mc)


class TestBuildTrainingSet:
    def test_patch_extraction(self):
        h = w = 16
        grid = RasterGrid(width=w, height=h, origin_x=0.0, origin_y=h * 30.0, pixel_size=30.0)
        rng = np.random.default_rng(47)
        data = rng.random((36, h, w)).astype(np.float32)
        stack = CompositeStack(
            data=data,
            counts=np.ones((6, h, w), dtype=np.int32),
            grid=grid,
            year_start=dt.date(2015, 5, 1),
        )
        labels = np.zeros((h, w), dtype=np.uint8)
        labels[1:6, 1:6] = IRRIGATED
        from irrseg.geodata import LabelRaster, Tile
        lr = LabelRaster(labels, grid)
        tiles = [
            Tile(0.0, h * 30.0 - 240.0, 240.0, h * 30.0),  # top-left 8x8, labeled
            Tile(240.0, 0.0, 480.0, 240.0),  # bottom-right 8x8, unlabeled
        ]
        ds = build_training_set(stack, lr, tiles)
        assert len(ds.tiles) == 1
        tile = ds.tiles[0]
        assert tile.features.shape == (36, 8, 8)
        assert tile.class_counts[IRRIGATED] == 25
        assert np.array_equal(tile.features, data[:, :8, :8])
