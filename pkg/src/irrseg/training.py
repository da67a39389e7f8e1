"""Optimization: Adam with step-decayed learning rate, class-balanced tile
sampling, and independent ensemble members trained on random tile subsets.

The learning rate follows lr = initial_lr * decay_factor ** (step //
decay_interval); the default decay_factor of 0.4 reads "decayed by 60%" as
multiply-by-0.4 (the multiply-by-0.6 reading stays one config field away).

Batch balancing works at tile granularity: each training tile is binned by
its dominant labeled class, and the sampler cycles the three class pools
round-robin, carrying the cycle position across batches so long-run
dominant-class frequencies converge to 1/3 each.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .compositing import CompositeStack
from .geodata import CLASS_CODES, IRRIGATED, LabelRaster, Tile, UNCULTIVATED, UNIRRIGATED
from .tensor import Tensor, l2_penalty, masked_cross_entropy
from .unet import UNet, UNetConfig

CLASS_ORDER = (IRRIGATED, UNIRRIGATED, UNCULTIVATED)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 100_000
    batch_size: int = 25
    initial_lr: float = 0.001
    decay_interval: int = 25_000
    decay_factor: float = 0.4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.001
    ensemble_size: int = 10
    subset_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1]")
        if not 0 < self.subset_fraction <= 1:
            raise ValueError("subset_fraction must be in (0, 1]")
        if min(self.total_steps, self.batch_size, self.decay_interval) < 0:
            raise ValueError("steps, batch size, and decay interval must be non-negative")


@dataclass
class SampleTile:
    """One training unit: a feature patch, its labels, and label tallies."""

    features: np.ndarray  # (c, t, t) float32
    labels: np.ndarray  # (t, t) uint8
    class_counts: dict[int, int] = field(default_factory=dict)

    def dominant_class(self) -> int:
        """Labeled class with the most pixels; ties go to the lowest code."""
        best, best_n = 0, -1
        for code in CLASS_ORDER:
            n = self.class_counts.get(code, 0)
            if n > best_n:
                best, best_n = code, n
        return best


@dataclass
class TrainingSet:
    tiles: list[SampleTile] = field(default_factory=list)

    def classes_present(self) -> set[int]:
        return {t.dominant_class() for t in self.tiles if any(t.class_counts.values())}


def build_training_set(stack: CompositeStack, labels: LabelRaster, tiles: list[Tile]) -> TrainingSet:
    """Cut grid tiles out of the stack/labels pair, keeping labeled ones.

    Tiles must align with whole pixels of the stack grid; tiles with no
    labeled pixel carry no training signal and are dropped.
    """
    grid = stack.grid
    out = TrainingSet()
    for tile in tiles:
        col0 = int(round((tile.x0 - grid.origin_x) / grid.pixel_size))
        row0 = int(round((grid.origin_y - tile.y1) / grid.pixel_size))
        size = int(round((tile.x1 - tile.x0) / grid.pixel_size))
        if col0 < 0 or row0 < 0 or col0 + size > grid.width or row0 + size > grid.height:
            continue
        patch = stack.data[:, row0:row0 + size, col0:col0 + size]
        lab = labels.data[row0:row0 + size, col0:col0 + size]
        counts = {code: int((lab == code).sum()) for code in CLASS_ORDER}
        if sum(counts.values()) == 0:
            continue
        out.tiles.append(SampleTile(patch.copy(), lab.copy(), counts))
    return out


def lr_schedule(step: int, config: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    return config.initial_lr * config.decay_factor ** (step // config.decay_interval)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    config: TrainConfig,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns the new parameter arrays.

    Any weight-decay contribution must already be folded into `grads`
    (coupled L2). Moments are float32 like the parameters.
    """
    state.step += 1
    t = state.step
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.m[name] = m
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        out[name] = (p - lr * mhat / (np.sqrt(vhat) + eps)).astype(np.float32)
    return out


class BalancedBatchSampler:
    """Round-robin class-balanced tile sampler (majority undersampling).

    The class cycle position persists across batches, so while a single
    batch gives one class at most one extra tile, long-run dominant-class
    frequencies even out at 1/3 each.
    """

    def __init__(self, dataset: TrainingSet, rng: np.random.Generator):
        self.rng = rng
        self.pools = {code: [] for code in CLASS_ORDER}
        for tile in dataset.tiles:
            self.pools[tile.dominant_class()].append(tile)
        missing = [code for code in CLASS_ORDER if not self.pools[code]]
        if missing:
            names = ", ".join(sorted(k for k, v in CLASS_CODES.items() if v in missing))
            raise ValueError(f"no training tiles for class(es): {names}")
        self._cursor = 0

    def sample(self, batch_size: int) -> list[SampleTile]:
        batch = []
        for _ in range(batch_size):
            pool = self.pools[CLASS_ORDER[self._cursor % len(CLASS_ORDER)]]
            self._cursor += 1
            batch.append(pool[int(self.rng.integers(len(pool)))])
        return batch


def balanced_batch_sampler(
    dataset: TrainingSet, batch_size: int, rng: np.random.Generator
) -> list[SampleTile]:
    """One-shot batch draw; training loops should keep a sampler instance."""
    return BalancedBatchSampler(dataset, rng).sample(batch_size)


def _batch_arrays(batch: list[SampleTile]) -> tuple[Tensor, np.ndarray]:
    feats = np.stack([t.features for t in batch]).astype(np.float32)
    labels = np.stack([t.labels for t in batch])
    return Tensor(feats), labels


@dataclass
class LossRecord:
    step: int
    lr: float
    loss: float
    class_counts: dict[int, int]


def write_loss_trace(path, trace: list[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss", "irrigated_px", "unirrigated_px", "uncultivated_px"])
        for rec in trace:
            writer.writerow(
                [rec.step, f"{rec.lr:.8g}", f"{rec.loss:.8g}"]
                + [rec.class_counts.get(code, 0) for code in CLASS_ORDER]
            )


def train_model(
    dataset: TrainingSet,
    config: TrainConfig,
    model_config: UNetConfig,
    log_every: int = 50,
) -> tuple[UNet, list[LossRecord]]:
    """Train one model: sample, forward, CE + weight decay, backward, Adam.

    Fully reproducible from (dataset, config, model_config): the init stream
    comes from model_config.seed and the sampling stream from
    config.seed + model_config.seed.
    """
    model = UNet(model_config)
    if config.total_steps == 0:
        return model, []
    sampler = BalancedBatchSampler(dataset, np.random.default_rng(config.seed + model_config.seed))
    opt = AdamState()
    trace: list[LossRecord] = []
    for step in range(config.total_steps):
        batch = sampler.sample(config.batch_size)
        feats, labels = _batch_arrays(batch)
        probs = model.forward(feats, "train")
        ce_loss, grad = masked_cross_entropy(probs, labels)
        wd_term, wd_grads = l2_penalty(model.conv_filters(), config.weight_decay)
        loss = ce_loss + wd_term
        if not np.isfinite(loss):
            raise ValueError(f"non-finite loss {loss!r} at step {step}")
        grads = model.backward(grad)
        for name, wg in zip(model.conv_weight_names(), wd_grads):
            grads[name] = grads[name] + wg
        lr = lr_schedule(step, config)
        new_params = adam_step(model.named_params(), grads, opt, lr, config)
        for name, arr in new_params.items():
            model.set_param(name, arr)
        if step % log_every == 0 or step == config.total_steps - 1:
            counts = {
                code: int(sum(t.class_counts.get(code, 0) for t in batch))
                for code in CLASS_ORDER
            }
            trace.append(LossRecord(step=step, lr=lr, loss=float(loss), class_counts=counts))
    return model, trace


def ensemble_member_config(model_config: UNetConfig, member: int) -> UNetConfig:
    """Seed derivation for ensemble member k (1-based)."""
    return replace(model_config, seed=model_config.seed + member)


def draw_subset(dataset: TrainingSet, fraction: float, seed: int) -> TrainingSet:
    """Tile subset without replacement, kept in canonical dataset order."""
    n = len(dataset.tiles)
    k = max(1, int(round(fraction * n)))
    idx = np.random.default_rng(seed).choice(n, size=k, replace=False)
    return TrainingSet(tiles=[dataset.tiles[i] for i in sorted(idx)])


def train_ensemble(
    dataset: TrainingSet,
    config: TrainConfig,
    model_config: UNetConfig,
    log_every: int = 50,
) -> list[tuple[UNet, list[LossRecord]]]:
    """Train ensemble_size independent models on random tile subsets.

    Member k (1-based) draws its subset with seed config.seed + k and
    initializes from model_config.seed + k. A subset that lost a class
    entirely is rejected up front.
    """
    if config.ensemble_size < 1:
        raise ValueError("ensemble_size must be >= 1")
    results = []
    for k in range(1, config.ensemble_size + 1):
        subset = draw_subset(dataset, config.subset_fraction, config.seed + k)
        missing = {1, 2, 3} - subset.classes_present()
        if missing:
            names = ", ".join(sorted(CLASS_CODES))
            raise ValueError(
                f"ensemble member {k} subset lost class code(s) {sorted(missing)} of ({names})"
            )
        member_cfg = ensemble_member_config(model_config, k)
        results.append(train_model(subset, config, member_cfg, log_every=log_every))
    return results
