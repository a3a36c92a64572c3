"""The five strategies for feeding multiple revisits to a model.

Three of them reduce the stack to a single image before the model (single
revisit, per-revisit dataset augmentation, temporal median composite); the
other two use every revisit at every step, either by fusing per-revisit
features inside the model with an elementwise temporal max or by fusing the
per-revisit output maps with a pixelwise median.
"""

from __future__ import annotations

from dataclasses import replace
from enum import Enum
from typing import Sequence

import numpy as np
import torch

from .data import DatasetManifest, GroundTruth, RevisitStack, TruthKind


class FusionStrategy(str, Enum):
    SINGLE_IMAGE = "single"
    AUGMENTED_DATASET = "augmented"
    MEDIAN_IMAGE = "median"
    OUTPUT_FUSION = "output_fusion"
    LATENT_TEMPORAL_MAX = "latent_max"


# Row order used by every comparison table.
CANONICAL_STRATEGY_ORDER = (
    FusionStrategy.SINGLE_IMAGE,
    FusionStrategy.AUGMENTED_DATASET,
    FusionStrategy.MEDIAN_IMAGE,
    FusionStrategy.OUTPUT_FUSION,
    FusionStrategy.LATENT_TEMPORAL_MAX,
)

STRATEGY_LABELS = {
    FusionStrategy.SINGLE_IMAGE: "Single Image",
    FusionStrategy.AUGMENTED_DATASET: "Augmented Dataset",
    FusionStrategy.MEDIAN_IMAGE: "Median Image",
    FusionStrategy.OUTPUT_FUSION: "Output Fusion",
    FusionStrategy.LATENT_TEMPORAL_MAX: "Latent Temporal Max",
}


def uses_full_stack(strategy: FusionStrategy) -> bool:
    """Whether the model consumes all T revisits (vs a single image)."""
    return strategy in (
        FusionStrategy.OUTPUT_FUSION,
        FusionStrategy.LATENT_TEMPORAL_MAX,
    )


def select_single(
    stack: RevisitStack, seed: int = 0, train: bool = False
) -> RevisitStack:
    """Keep one revisit: random under training, index 0 at evaluation."""
    if stack.t == 1:
        return stack
    index = int(np.random.default_rng(seed).integers(stack.t)) if train else 0
    return replace(stack, data=stack.data[index : index + 1].copy())


def expand_augmented(manifest: DatasetManifest) -> DatasetManifest:
    """Turn each train location into one sample per revisit, same truth.

    The test split is left untouched; evaluation is always per location.
    """
    entries = []
    for entry in manifest.entries:
        if entry.split != "train":
            entries.append(entry)
            continue
        for k, revisit in enumerate(entry.revisits):
            entries.append(replace(entry, revisits=(revisit,)))
    return replace(manifest, entries=tuple(entries))


def median_composite(stack: RevisitStack) -> RevisitStack:
    """Pixelwise, bandwise temporal median (even T: mean of middle pair)."""
    data = np.median(stack.data, axis=0, keepdims=True).astype(np.float32)
    return replace(stack, data=data)


def temporal_median(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Differentiable median along ``dim`` with the even-count mean rule."""
    n = x.shape[dim]
    ordered, _ = torch.sort(x, dim=dim)
    mid = n // 2
    if n % 2 == 1:
        return ordered.select(dim, mid)
    return 0.5 * (ordered.select(dim, mid - 1) + ordered.select(dim, mid))


FeatureMaps = Sequence[torch.Tensor]


def temporal_max_fuse(features: Sequence[FeatureMaps | torch.Tensor]):
    """Elementwise maximum over per-revisit features, scale by scale.

    ``features`` holds one entry per revisit, each entry either a tensor or
    an ordered sequence of per-scale tensors. All entries must be
    shape-identical; a single entry fuses to itself.
    """
    if len(features) == 0:
        raise ValueError("no features to fuse")
    if isinstance(features[0], torch.Tensor):
        return _max_over(list(features))
    n_scales = len(features[0])
    for entry in features:
        if len(entry) != n_scales:
            raise ValueError("per-revisit feature lists differ in scale count")
    return [_max_over([entry[s] for entry in features]) for s in range(n_scales)]


def _max_over(tensors: list[torch.Tensor]) -> torch.Tensor:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"feature shape mismatch: {t.shape} vs {shape}")
    if len(tensors) == 1:
        return tensors[0]
    # torch.max routes the gradient to the returned index; on ties the
    # lowest revisit index wins, keeping subgradients reproducible.
    return torch.max(torch.stack(tensors, dim=0), dim=0).values


def output_fuse(maps: Sequence[np.ndarray], kind: TruthKind = TruthKind.MASK):
    """Pixelwise median of per-revisit output maps.

    For masks the inputs are pre-threshold (logit) maps and the fused map is
    thresholded at 0; for densities the median map is returned as is.
    """
    if len(maps) == 0:
        raise ValueError("no maps to fuse")
    shape = np.shape(maps[0])
    for m in maps[1:]:
        if np.shape(m) != shape:
            raise ValueError(f"map shape mismatch: {np.shape(m)} vs {shape}")
    median = np.median(np.stack([np.asarray(m) for m in maps]), axis=0)
    if TruthKind(kind) == TruthKind.MASK:
        return median > 0.0
    return median.astype(np.float32)
