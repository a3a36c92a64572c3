"""Training loop, evaluation protocol and the negative-image report.

Training is deterministic given the config seed when run in single-threaded
math mode: model init, batch order, per-epoch revisit choices and dropout
all derive from it. All parameters train (no frozen encoder).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .data import (
    BandSpec,
    DatasetError,
    DatasetManifest,
    NormalizationMode,
    NormalizationSpec,
    TruthKind,
    fit_normalization,
    load_stack,
    load_truth,
    normalize,
    sample_revisit_indices,
    select_bands,
)
from .fusion import (
    FusionStrategy,
    expand_augmented,
    temporal_median,
    output_fuse,
)
from .metrics import (
    MetricReport,
    NegativeStats,
    compute_iou,
    compute_mse,
    summarize_negative_counts,
)
from .models import FusionSegmenter, ModelConfig, build_model


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; training aborted."""


LOSSES = ("bce", "bce_dice", "mse")


@dataclass(frozen=True)
class TrainConfig:
    # model/strategy/seed are filled in by the experiment harness when this
    # is used as a shared hyperparameter template
    model: ModelConfig | None = None
    strategy: FusionStrategy = FusionStrategy.LATENT_TEMPORAL_MAX
    epochs: int = 8
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    loss: str = "bce"
    seed: int = 0
    t_revisits: int = 4
    normalization: NormalizationMode = NormalizationMode.CONSTANT
    norm_constant: float = 4000.0
    norm_sample_size: int = 64
    augment: str = "none"  # none | flips | full
    eval_every: int = 1  # 0 evaluates only after the last epoch
    bands: tuple[str, ...] | None = None  # optional channel subset

    def __post_init__(self):
        if self.bands is not None:
            object.__setattr__(self, "bands", tuple(self.bands))
        object.__setattr__(self, "strategy", FusionStrategy(self.strategy))
        object.__setattr__(
            self, "normalization", NormalizationMode(self.normalization)
        )
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.t_revisits < 1:
            raise ValueError("t_revisits must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.augment not in ("none", "flips", "full"):
            raise ValueError(f"unknown augment mode {self.augment!r}")
        if self.model is not None:
            seg_losses = ("bce", "bce_dice")
            if self.model.head == "segmentation" and self.loss not in seg_losses:
                raise ValueError("segmentation head requires a bce-style loss")
            if self.model.head == "density" and self.loss != "mse":
                raise ValueError("density head requires the mse loss")


@dataclass
class ArraySplit:
    """One split loaded into memory, already normalized."""

    stacks: np.ndarray  # [N, T, C, H, W] float32
    truths: np.ndarray  # [N, H, W] float32
    negatives: np.ndarray  # [N] bool
    ids: list[str]
    truth_kind: TruthKind

    @property
    def n(self) -> int:
        return self.stacks.shape[0]


@dataclass
class TrainLog:
    strategy: FusionStrategy
    epoch_losses: list[float] = field(default_factory=list)
    epoch_metrics: list[float | None] = field(default_factory=list)
    final_report: MetricReport | None = None
    norm_spec: NormalizationSpec | None = None
    wall_time: float = 0.0


def load_arrays(
    manifest: DatasetManifest,
    split: str,
    t_revisits: int,
    norm_spec: NormalizationSpec | None,
    sample_seed: int = 0,
    band_spec: BandSpec | None = None,
) -> ArraySplit:
    """Load a split with exactly ``t_revisits`` revisits per location."""
    entries = manifest.split_entries(split)
    if not entries:
        raise DatasetError(f"{split} split is empty")
    stacks, truths, negatives, ids = [], [], [], []
    for i, entry in enumerate(entries):
        seed = int(np.random.SeedSequence([sample_seed, i]).generate_state(1)[0])
        indices = sample_revisit_indices(len(entry.revisits), t_revisits, seed)
        stack = load_stack(manifest, entry, indices)
        if band_spec is not None:
            stack = select_bands(stack, band_spec)
        if norm_spec is not None:
            stack = normalize(stack, norm_spec)
        truth = load_truth(manifest, entry)
        if truth.spatial_shape != stack.spatial_shape:
            raise DatasetError(
                f"{entry.location_id}: truth shape {truth.spatial_shape} does not "
                f"match stack shape {stack.spatial_shape}"
            )
        stacks.append(stack.data)
        truths.append(truth.values)
        negatives.append(entry.negative)
        ids.append(entry.location_id)
    return ArraySplit(
        stacks=np.stack(stacks),
        truths=np.stack(truths),
        negatives=np.asarray(negatives, dtype=bool),
        ids=ids,
        truth_kind=manifest.truth_kind,
    )


def _dice_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    eps = 1.0
    inter = (probs * target).sum(dim=(1, 2, 3))
    denom = probs.sum(dim=(1, 2, 3)) + target.sum(dim=(1, 2, 3))
    return (1.0 - (2 * inter + eps) / (denom + eps)).mean()


def _make_loss(config: TrainConfig) -> Callable[[torch.Tensor, torch.Tensor], torch.Tensor]:
    if config.loss == "bce":
        return lambda out, y: F.binary_cross_entropy_with_logits(out, y)
    if config.loss == "bce_dice":
        return lambda out, y: F.binary_cross_entropy_with_logits(out, y) + 0.5 * _dice_loss(
            torch.sigmoid(out), y
        )
    return lambda out, y: F.mse_loss(out, y)


def _flip_rot_batch(
    xb: np.ndarray, yb: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Sample-wise random flips and 90-degree rotations, shared by x and y."""
    xb = xb.copy()
    yb = yb.copy()
    for i in range(xb.shape[0]):
        if rng.random() < 0.5:
            xb[i] = np.flip(xb[i], axis=-1)
            yb[i] = np.flip(yb[i], axis=-1)
        if rng.random() < 0.5:
            xb[i] = np.flip(xb[i], axis=-2)
            yb[i] = np.flip(yb[i], axis=-2)
        k = int(rng.integers(4))
        if k:
            xb[i] = np.rot90(xb[i], k=k, axes=(-2, -1))
            yb[i] = np.rot90(yb[i], k=k, axes=(-2, -1))
    return np.ascontiguousarray(xb), np.ascontiguousarray(yb)


def _forward_for_training(
    model: FusionSegmenter, xb: torch.Tensor, strategy: FusionStrategy
) -> torch.Tensor:
    """Raw model map [B, 1, H, W] with the strategy's fusion applied."""
    if strategy == FusionStrategy.OUTPUT_FUSION:
        outs = torch.stack(
            [model(xb[:, t : t + 1]) for t in range(xb.shape[1])], dim=0
        )
        return temporal_median(outs, dim=0)
    return model(xb)


def train(config: TrainConfig, manifest: DatasetManifest) -> tuple[FusionSegmenter, TrainLog]:
    """Train one model with one strategy on the manifest's train split."""
    if config.model is None:
        raise ValueError("TrainConfig.model must be set to train")
    start = time.time()
    torch.manual_seed(config.seed)
    band_spec = BandSpec(selected=config.bands) if config.bands else None
    norm_spec = fit_normalization(
        manifest,
        config.normalization,
        sample_size=config.norm_sample_size,
        seed=config.seed,
        constant=config.norm_constant,
        band_spec=band_spec,
    )

    strategy = config.strategy
    if strategy == FusionStrategy.AUGMENTED_DATASET:
        train_arrays = load_arrays(
            expand_augmented(manifest), "train", 1, norm_spec,
            sample_seed=config.seed, band_spec=band_spec,
        )
    else:
        train_arrays = load_arrays(
            manifest, "train", config.t_revisits, norm_spec,
            sample_seed=config.seed, band_spec=band_spec,
        )
    # the test split's revisit subsets stay fixed across run seeds
    test_arrays = load_arrays(
        manifest, "test", config.t_revisits, norm_spec,
        sample_seed=0, band_spec=band_spec,
    )

    x_train = train_arrays.stacks
    if strategy == FusionStrategy.MEDIAN_IMAGE:
        x_train = np.median(x_train, axis=1, keepdims=True).astype(np.float32)
    y_train = train_arrays.truths[:, None]  # [N, 1, H, W]

    model = build_model(config.model, seed=config.seed)
    params = model.parameters()
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    else:
        optimizer = torch.optim.SGD(params, lr=config.learning_rate, momentum=0.9)
    loss_fn = _make_loss(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    log = TrainLog(strategy=strategy, norm_spec=norm_spec)

    n = x_train.shape[0]
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(n)
        if strategy == FusionStrategy.SINGLE_IMAGE:
            revisit_choice = rng.integers(x_train.shape[1], size=n)
        epoch_loss, n_batches = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            if strategy == FusionStrategy.SINGLE_IMAGE:
                xb = x_train[idx, revisit_choice[idx]][:, None]
            else:
                xb = x_train[idx]
            yb = y_train[idx]
            if config.augment == "flips":
                xb, yb = _flip_rot_batch(xb, yb, rng)
            elif config.augment == "full":
                xb, yb = _augment_full(xb, yb, train_arrays.truth_kind, rng)
            out = _forward_for_training(
                model, torch.from_numpy(np.ascontiguousarray(xb)), strategy
            )
            loss = loss_fn(out, torch.from_numpy(np.ascontiguousarray(yb)))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches} "
                    f"(strategy={strategy.value}, seed={config.seed})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        log.epoch_losses.append(epoch_loss / max(n_batches, 1))
        if config.eval_every and (epoch + 1) % config.eval_every == 0:
            report = evaluate_arrays(model, test_arrays, strategy, config.batch_size)
            log.epoch_metrics.append(report.primary)
        else:
            log.epoch_metrics.append(None)

    log.final_report = evaluate_arrays(model, test_arrays, strategy, config.batch_size)
    log.wall_time = time.time() - start
    return model, log


def _augment_full(xb, yb, truth_kind, rng):
    from .data import AugmentConfig, GroundTruth, RevisitStack, geometric_augment

    out_x, out_y = xb.copy(), yb.copy()
    band_stub = tuple(f"c{i}" for i in range(xb.shape[2]))
    for i in range(xb.shape[0]):
        stack = RevisitStack(data=xb[i], band_names=band_stub)
        truth = GroundTruth(kind=truth_kind, values=yb[i, 0])
        seed = int(rng.integers(2**31))
        stack, truth = geometric_augment(stack, truth, seed, AugmentConfig())
        out_x[i] = stack.data
        out_y[i, 0] = truth.values
    return out_x, out_y


def _eval_inputs(x: np.ndarray, strategy: FusionStrategy) -> np.ndarray:
    if strategy in (FusionStrategy.SINGLE_IMAGE, FusionStrategy.AUGMENTED_DATASET):
        return x[:, :1]  # deterministic eval: revisit index 0
    if strategy == FusionStrategy.MEDIAN_IMAGE:
        return np.median(x, axis=1, keepdims=True).astype(np.float32)
    return x


def evaluate_arrays(
    model: FusionSegmenter,
    arrays: ArraySplit,
    strategy: FusionStrategy,
    batch_size: int = 8,
) -> MetricReport:
    """Eval-mode metrics over one loaded split."""
    model.eval()
    kind = arrays.truth_kind
    x_all = _eval_inputs(arrays.stacks, strategy)
    ious, mses, negative_counts = [], [], []
    inter_total = union_total = 0
    with torch.no_grad():
        for lo in range(0, arrays.n, batch_size):
            xb = torch.from_numpy(np.ascontiguousarray(x_all[lo : lo + batch_size]))
            yb = arrays.truths[lo : lo + batch_size]
            if strategy == FusionStrategy.OUTPUT_FUSION:
                per_t = [
                    model(xb[:, t : t + 1]).numpy() for t in range(xb.shape[1])
                ]
                fused = [
                    output_fuse([m[i, 0] for m in per_t], kind)
                    for i in range(xb.shape[0])
                ]
                preds = np.stack(fused)
            else:
                out = model(xb).numpy()[:, 0]
                preds = (out > 0.0) if kind == TruthKind.MASK else out
            for i in range(preds.shape[0]):
                if kind == TruthKind.MASK:
                    pred, true = preds[i], yb[i] > 0.5
                    ious.append(compute_iou(pred, true))
                    inter_total += int(np.logical_and(pred, true).sum())
                    union_total += int(np.logical_or(pred, true).sum())
                    if arrays.negatives[lo + i]:
                        negative_counts.append(int(pred.sum()))
                else:
                    mses.append(compute_mse(preds[i], yb[i]))

    if kind == TruthKind.MASK:
        return MetricReport(
            n_images=arrays.n,
            iou=float(np.mean(ious)),
            iou_pooled=(inter_total / union_total) if union_total else 1.0,
            negative_stats=(
                summarize_negative_counts(negative_counts)
                if negative_counts
                else None
            ),
        )
    return MetricReport(n_images=arrays.n, mse=float(np.mean(mses)))


def evaluate(
    model: FusionSegmenter,
    manifest: DatasetManifest,
    strategy: FusionStrategy,
    norm_spec: NormalizationSpec | None = None,
    t_revisits: int = 4,
    batch_size: int = 8,
    band_spec: BandSpec | None = None,
) -> MetricReport:
    """Evaluate on the manifest's test split with strategy-matched inputs."""
    arrays = load_arrays(
        manifest, "test", t_revisits, norm_spec, sample_seed=0, band_spec=band_spec
    )
    return evaluate_arrays(model, arrays, FusionStrategy(strategy), batch_size)


def negative_image_report(
    model: FusionSegmenter,
    manifest: DatasetManifest,
    strategy: FusionStrategy = FusionStrategy.LATENT_TEMPORAL_MAX,
    norm_spec: NormalizationSpec | None = None,
    t_revisits: int = 4,
    split: str | None = "test",
    batch_size: int = 8,
    band_spec: BandSpec | None = None,
) -> NegativeStats:
    """False-positive statistics over the manifest's negative locations."""
    strategy = FusionStrategy(strategy)
    if manifest.truth_kind != TruthKind.MASK:
        raise DatasetError("the negative-image report applies to mask datasets only")
    entries = manifest.negatives(split)
    if not entries:
        raise DatasetError(
            "manifest has no negative locations"
            + (f" in split {split!r}" if split else "")
        )
    subset = replace(
        manifest, entries=tuple(replace(e, split="test") for e in entries)
    )
    arrays = load_arrays(
        subset, "test", t_revisits, norm_spec, sample_seed=0, band_spec=band_spec
    )
    report = evaluate_arrays(model, arrays, strategy, batch_size)
    return report.negative_stats
