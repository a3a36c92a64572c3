"""Segmentation/regression metrics and multi-seed aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Reporting boundary for positive-pixel counts on negative images.
NEGATIVE_PIXEL_BUCKET = 100


def compute_iou(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Two empty masks score 1.0 so that correctly-blank predictions on
    negative images do not drag the dataset mean down.
    """
    pred = np.asarray(pred_mask).astype(bool)
    true = np.asarray(true_mask).astype(bool)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    union = int(np.logical_or(pred, true).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, true).sum()) / union


def compute_mse(pred: np.ndarray, true: np.ndarray) -> float:
    """Mean squared pixel difference between two maps."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(true, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))


@dataclass(frozen=True)
class RunResult:
    """Per-seed metric values with their mean and standard error."""

    values: tuple[float, ...]
    mean: float
    stderr: float
    n_seeds: int
    single_seed: bool = False


def aggregate_runs(values) -> RunResult:
    """Mean and standard error (sample std over sqrt(n)) of seed metrics.

    A single value aggregates to stderr 0.0 with ``single_seed`` flagged.
    """
    values = tuple(float(v) for v in values)
    n = len(values)
    if n == 0:
        raise ValueError("no values to aggregate")
    mean = float(np.mean(values))
    if n == 1:
        return RunResult(values=values, mean=mean, stderr=0.0, n_seeds=1, single_seed=True)
    stderr = float(np.std(values, ddof=1) / math.sqrt(n))
    return RunResult(values=values, mean=mean, stderr=stderr, n_seeds=n)


@dataclass(frozen=True)
class NegativeStats:
    """False-positive behaviour on images without any target."""

    n_images: int
    flagged_fraction: float  # images with >= 1 positive pixel
    buckets: dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "flagged_fraction": self.flagged_fraction,
            "buckets": dict(self.buckets),
        }


def summarize_negative_counts(positive_counts) -> NegativeStats:
    counts = [int(c) for c in positive_counts]
    if not counts:
        raise ValueError("no negative images to summarize")
    flagged = sum(1 for c in counts if c > 0)
    buckets = {
        "0": sum(1 for c in counts if c == 0),
        f"1-{NEGATIVE_PIXEL_BUCKET - 1}": sum(
            1 for c in counts if 0 < c < NEGATIVE_PIXEL_BUCKET
        ),
        f"{NEGATIVE_PIXEL_BUCKET}+": sum(
            1 for c in counts if c >= NEGATIVE_PIXEL_BUCKET
        ),
    }
    return NegativeStats(
        n_images=len(counts),
        flagged_fraction=flagged / len(counts),
        buckets=buckets,
    )


@dataclass(frozen=True)
class MetricReport:
    """Test-set evaluation summary for one model under one strategy."""

    n_images: int
    iou: float | None = None  # mean of per-image IoU
    iou_pooled: float | None = None  # dataset-pooled intersection/union
    mse: float | None = None
    negative_stats: NegativeStats | None = None

    @property
    def primary(self) -> float:
        """Headline metric: IoU for masks, MSE for densities."""
        return self.iou if self.iou is not None else self.mse
