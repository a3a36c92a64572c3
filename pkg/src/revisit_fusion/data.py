"""Core data model for multi-revisit satellite imagery.

A location is a stack of T co-registered revisit images ([T, C, H, W] raw
digital numbers) plus a single ground truth (binary mask or density map in
[0, 1]). Datasets live on disk as one directory per location containing
``revisit_<k>.npy`` arrays, a ``truth.npy`` array and a ``bands.json``
sidecar, indexed by a JSON manifest that records split membership and the
per-location negative flag.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

ENV_DATA_ROOT = "REVISIT_FUSION_DATA_ROOT"

SENTINEL2_BANDS = (
    "B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B10",
    "B11", "B12",
)

# Replacements for spectral bands missing from a product, each replacement
# being a strongly correlated band that must itself be present.
PHILEO_SUBSTITUTIONS = {"B1": "B2", "B9": "B8A", "B10": "B11"}


class DatasetError(Exception):
    """Malformed dataset contents or manifest."""


class InvalidSpecError(ValueError):
    """A normalization spec violates its mode's field requirements."""


class MissingBandError(KeyError):
    """A requested band cannot be resolved directly or via substitution."""

    def __init__(self, band: str):
        super().__init__(band)
        self.band = band

    def __str__(self) -> str:
        return f"band {self.band!r} is not present and has no usable substitution"


class DegenerateDataError(ValueError):
    """Fitted statistics are unusable (e.g. zero spread in a band)."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RevisitStack:
    """T co-registered revisits of one location, [T, C, H, W] float32."""

    data: np.ndarray
    band_names: tuple[str, ...]
    location_id: str = ""

    def __post_init__(self):
        if self.data.ndim != 4:
            raise DatasetError(f"stack must be [T, C, H, W], got shape {self.data.shape}")
        t, c, _, _ = self.data.shape
        if t < 1:
            raise DatasetError("stack needs at least one revisit")
        if len(self.band_names) != c:
            raise DatasetError(
                f"{len(self.band_names)} band names for {c} channels"
            )
        if len(set(self.band_names)) != len(self.band_names):
            raise DatasetError(f"duplicate band names: {self.band_names}")
        if not np.isfinite(self.data).all():
            raise DatasetError("stack contains NaN/Inf (inputs must be pre-filtered)")

    @property
    def t(self) -> int:
        return self.data.shape[0]

    @property
    def n_bands(self) -> int:
        return self.data.shape[1]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]


class TruthKind(str, Enum):
    MASK = "mask"
    DENSITY = "density"


@dataclass(frozen=True)
class GroundTruth:
    """Per-location target: binary mask or density map in [0, 1]."""

    kind: TruthKind
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DatasetError(f"truth must be [H, W], got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise DatasetError("truth contains NaN/Inf")
        if self.kind == TruthKind.MASK:
            if not np.isin(self.values, (0.0, 1.0)).all():
                raise DatasetError("mask values must be exactly 0 or 1")
        else:
            if self.values.min() < 0.0 or self.values.max() > 1.0:
                raise DatasetError("density values must lie in [0, 1]")

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.values.shape


class NormalizationMode(str, Enum):
    STANDARDIZE = "standardize"
    PERCENTILE = "percentile"
    CONSTANT = "constant"


@dataclass(frozen=True)
class NormalizationSpec:
    """Per-band pixel scaling parameters for one of the three modes.

    Exactly the fields used by ``mode`` may be set: (mean, std) for
    standardize, (p_low, p_high) for percentile, constant otherwise.
    """

    mode: NormalizationMode
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    p_low: np.ndarray | None = None
    p_high: np.ndarray | None = None
    constant: float | None = None

    def __post_init__(self):
        mode = NormalizationMode(self.mode)
        object.__setattr__(self, "mode", mode)
        required = {
            NormalizationMode.STANDARDIZE: ("mean", "std"),
            NormalizationMode.PERCENTILE: ("p_low", "p_high"),
            NormalizationMode.CONSTANT: ("constant",),
        }[mode]
        for name in ("mean", "std", "p_low", "p_high", "constant"):
            value = getattr(self, name)
            if name in required and value is None:
                raise InvalidSpecError(f"{mode.value} normalization requires {name}")
            if name not in required and value is not None:
                raise InvalidSpecError(f"{name} is not a {mode.value} field")
        if mode == NormalizationMode.STANDARDIZE:
            object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
            object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
            if np.any(self.std <= 0):
                raise InvalidSpecError("std must be > 0 for every band")
        elif mode == NormalizationMode.PERCENTILE:
            object.__setattr__(self, "p_low", np.asarray(self.p_low, dtype=np.float64))
            object.__setattr__(self, "p_high", np.asarray(self.p_high, dtype=np.float64))
            if np.any(self.p_high <= self.p_low):
                raise InvalidSpecError("p_high must exceed p_low for every band")
        else:
            if self.constant <= 0:
                raise InvalidSpecError("constant must be > 0")


def norm_spec_to_dict(spec: NormalizationSpec) -> dict:
    def listify(v):
        return None if v is None else np.asarray(v).tolist()

    return {
        "mode": spec.mode.value,
        "mean": listify(spec.mean),
        "std": listify(spec.std),
        "p_low": listify(spec.p_low),
        "p_high": listify(spec.p_high),
        "constant": spec.constant,
    }


def norm_spec_from_dict(doc: dict) -> NormalizationSpec:
    return NormalizationSpec(
        mode=NormalizationMode(doc["mode"]),
        mean=None if doc.get("mean") is None else np.asarray(doc["mean"]),
        std=None if doc.get("std") is None else np.asarray(doc["std"]),
        p_low=None if doc.get("p_low") is None else np.asarray(doc["p_low"]),
        p_high=None if doc.get("p_high") is None else np.asarray(doc["p_high"]),
        constant=doc.get("constant"),
    )


@dataclass(frozen=True)
class BandSpec:
    """Ordered band selection with optional one-step substitutions."""

    selected: tuple[str, ...]
    substitutions: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "selected", tuple(self.selected))
        object.__setattr__(self, "substitutions", dict(self.substitutions))


@dataclass(frozen=True)
class LocationEntry:
    location_id: str
    revisits: tuple[str, ...]
    truth: str
    split: str
    negative: bool

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise DatasetError(f"unknown split {self.split!r}")
        if len(self.revisits) < 1:
            raise DatasetError(f"{self.location_id}: no revisit files")
        object.__setattr__(self, "revisits", tuple(self.revisits))


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[LocationEntry, ...]
    truth_kind: TruthKind = TruthKind.MASK

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "truth_kind", TruthKind(self.truth_kind))
        seen: dict[str, str] = {}
        for e in self.entries:
            if e.location_id in seen:
                raise DatasetError(f"location {e.location_id} listed twice")
            seen[e.location_id] = e.split

    def split_entries(self, split: str) -> tuple[LocationEntry, ...]:
        return tuple(e for e in self.entries if e.split == split)

    def negatives(self, split: str | None = None) -> tuple[LocationEntry, ...]:
        pool = self.entries if split is None else self.split_entries(split)
        return tuple(e for e in pool if e.negative)


# ---------------------------------------------------------------------------
# Manifest and array IO
# ---------------------------------------------------------------------------


def resolve_root(manifest_path: Path | str) -> Path:
    """Dataset root: env override if set, else the manifest's directory."""
    env = os.environ.get(ENV_DATA_ROOT)
    if env:
        return Path(env)
    return Path(manifest_path).resolve().parent


def save_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    doc = {
        "truth_kind": manifest.truth_kind.value,
        "locations": [
            {
                "location_id": e.location_id,
                "revisits": list(e.revisits),
                "truth": e.truth,
                "split": e.split,
                "negative": e.negative,
                "revisit_count": len(e.revisits),
            }
            for e in manifest.entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path: Path | str) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = tuple(
        LocationEntry(
            location_id=loc["location_id"],
            revisits=tuple(loc["revisits"]),
            truth=loc["truth"],
            split=loc["split"],
            negative=bool(loc["negative"]),
        )
        for loc in doc["locations"]
    )
    return DatasetManifest(
        root=resolve_root(path), entries=entries, truth_kind=doc["truth_kind"]
    )


def save_location(
    directory: Path | str, stack: RevisitStack, truth: GroundTruth
) -> None:
    """Write one location in the on-disk layout (float32 .npy + sidecar)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k in range(stack.t):
        np.save(directory / f"revisit_{k}.npy", stack.data[k].astype(np.float32))
    np.save(directory / "truth.npy", truth.values.astype(np.float32))
    sidecar = {"band_names": list(stack.band_names)}
    (directory / "bands.json").write_text(json.dumps(sidecar) + "\n")


def load_stack(
    manifest: DatasetManifest,
    entry: LocationEntry,
    revisit_indices: Sequence[int] | None = None,
) -> RevisitStack:
    paths = entry.revisits
    if revisit_indices is not None:
        paths = tuple(entry.revisits[i] for i in revisit_indices)
    arrays = [np.load(manifest.root / p) for p in paths]
    data = np.stack(arrays).astype(np.float32)
    sidecar_path = manifest.root / Path(entry.revisits[0]).parent / "bands.json"
    band_names = tuple(json.loads(sidecar_path.read_text())["band_names"])
    return RevisitStack(data=data, band_names=band_names, location_id=entry.location_id)


def load_truth(manifest: DatasetManifest, entry: LocationEntry) -> GroundTruth:
    values = np.load(manifest.root / entry.truth).astype(np.float32)
    return GroundTruth(kind=manifest.truth_kind, values=values)


def sample_revisit_indices(
    n_available: int, n_wanted: int, seed: int
) -> tuple[int, ...]:
    """Pick exactly n_wanted revisits, with replacement only when short.

    The subset is sorted so the temporal order on disk is preserved. With
    n_available == n_wanted this is the identity selection.
    """
    rng = np.random.default_rng(seed)
    if n_available >= n_wanted:
        idx = rng.choice(n_available, size=n_wanted, replace=False)
    else:
        idx = rng.choice(n_available, size=n_wanted, replace=True)
    return tuple(int(i) for i in np.sort(idx))


def assign_splits(n: int, train_fraction: float, seed: int) -> tuple[str, ...]:
    """Random split labels with an exact train count of round(frac * n)."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = int(round(train_fraction * n))
    order = np.random.default_rng(seed).permutation(n)
    labels = np.array(["test"] * n, dtype=object)
    labels[order[:n_train]] = "train"
    return tuple(labels)


# ---------------------------------------------------------------------------
# Pixel operations
# ---------------------------------------------------------------------------


def normalize(stack: RevisitStack, spec: NormalizationSpec) -> RevisitStack:
    """Scale pixel values per band according to the spec's mode.

    standardize: (x - mean) / std; percentile: (x - p_low) / (p_high - p_low)
    clipped to [0, 1]; constant: clip(x / constant, 0, 1).
    """
    x = stack.data.astype(np.float32)
    c = stack.n_bands
    if spec.mode == NormalizationMode.STANDARDIZE:
        mean, std = _per_band(spec.mean, c), _per_band(spec.std, c)
        out = (x - mean) / std
    elif spec.mode == NormalizationMode.PERCENTILE:
        lo, hi = _per_band(spec.p_low, c), _per_band(spec.p_high, c)
        out = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    else:
        out = np.clip(x / spec.constant, 0.0, 1.0)
    return replace(stack, data=out.astype(np.float32))


def _per_band(values: np.ndarray, n_bands: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32).reshape(-1)
    if arr.size == 1:
        arr = np.repeat(arr, n_bands)
    if arr.size != n_bands:
        raise InvalidSpecError(f"expected {n_bands} per-band values, got {arr.size}")
    return arr.reshape(1, n_bands, 1, 1)


def fit_normalization(
    manifest: DatasetManifest,
    mode: NormalizationMode | str,
    sample_size: int,
    seed: int = 0,
    constant: float = 4000.0,
    percentiles: tuple[float, float] = (1.0, 99.0),
    band_spec: "BandSpec | None" = None,
) -> NormalizationSpec:
    """Fit per-band statistics on a seeded random sample of train locations."""
    mode = NormalizationMode(mode)
    if sample_size < 1:
        raise ValueError("sample_size must be >= 1")
    if mode == NormalizationMode.CONSTANT:
        return NormalizationSpec(mode=mode, constant=constant)
    train = manifest.split_entries("train")
    if not train:
        raise DatasetError("cannot fit normalization: train split is empty")
    rng = np.random.default_rng(seed)
    take = min(sample_size, len(train))
    chosen = rng.choice(len(train), size=take, replace=False)
    pixels = []
    for i in chosen:
        stack = load_stack(manifest, train[int(i)])
        if band_spec is not None:
            stack = select_bands(stack, band_spec)
        # [T, C, H, W] -> [C, T*H*W]
        pixels.append(stack.data.transpose(1, 0, 2, 3).reshape(stack.n_bands, -1))
    values = np.concatenate(pixels, axis=1).astype(np.float64)
    if mode == NormalizationMode.STANDARDIZE:
        mean = values.mean(axis=1)
        std = values.std(axis=1)
        if np.any(std == 0):
            bad = [i for i, s in enumerate(std) if s == 0]
            raise DegenerateDataError(f"zero std in band index(es) {bad}")
        return NormalizationSpec(mode=mode, mean=mean, std=std)
    lo = np.percentile(values, percentiles[0], axis=1)
    hi = np.percentile(values, percentiles[1], axis=1)
    if np.any(hi <= lo):
        bad = [i for i in range(len(lo)) if hi[i] <= lo[i]]
        raise DegenerateDataError(f"degenerate percentile range in band index(es) {bad}")
    return NormalizationSpec(mode=mode, p_low=lo, p_high=hi)


def select_bands(stack: RevisitStack, bands: BandSpec) -> RevisitStack:
    """Reorder/subset channels; unavailable bands copy their substitute."""
    index = {name: i for i, name in enumerate(stack.band_names)}
    rows = []
    for name in bands.selected:
        if name in index:
            rows.append(index[name])
            continue
        substitute = bands.substitutions.get(name)
        if substitute is not None and substitute in index:
            rows.append(index[substitute])
            continue
        raise MissingBandError(name)
    data = np.ascontiguousarray(stack.data[:, rows])
    return replace(stack, data=data, band_names=tuple(bands.selected))


def load_band_specs(path: Path | str | None = None) -> dict[str, BandSpec]:
    """Band-spec file: JSON mapping model name -> {selected, substitutions}."""
    if path is None:
        path = Path(__file__).with_name("band_specs.json")
    doc = json.loads(Path(path).read_text())
    return {
        name: BandSpec(
            selected=tuple(entry["selected"]),
            substitutions=dict(entry.get("substitutions", {})),
        )
        for name, entry in doc.items()
    }


def resize(stack: RevisitStack, target: tuple[int, int]) -> RevisitStack:
    """Bilinear resize of every revisit and band to (H', W')."""
    h, w = target
    if h < 1 or w < 1:
        raise DatasetError(f"invalid resize target {target}")
    if (h, w) == stack.spatial_shape:
        return stack
    t = torch.from_numpy(np.ascontiguousarray(stack.data))
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return replace(stack, data=out.numpy().astype(np.float32))


def resize_truth(truth: GroundTruth, target: tuple[int, int]) -> GroundTruth:
    """Masks resize nearest-neighbor (stay binary), densities bilinearly."""
    h, w = target
    if h < 1 or w < 1:
        raise DatasetError(f"invalid resize target {target}")
    if (h, w) == truth.spatial_shape:
        return truth
    t = torch.from_numpy(np.ascontiguousarray(truth.values))[None, None]
    mode = "nearest-exact" if truth.kind == TruthKind.MASK else "bilinear"
    kwargs = {} if truth.kind == TruthKind.MASK else {"align_corners": False}
    out = F.interpolate(t, size=(h, w), mode=mode, **kwargs)
    return replace(truth, values=out[0, 0].numpy().astype(np.float32))


# ---------------------------------------------------------------------------
# Geometric augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    """Which transform families to sample and their magnitudes."""

    flip_prob: float = 0.5
    rot90: bool = True
    affine: bool = True
    max_rotation_deg: float = 15.0
    max_translate_frac: float = 0.10
    scale_range: tuple[float, float] = (0.9, 1.1)


def geometric_augment(
    stack: RevisitStack,
    truth: GroundTruth,
    seed: int,
    config: AugmentConfig = AugmentConfig(),
) -> tuple[RevisitStack, GroundTruth]:
    """Apply one jointly-sampled transform to every revisit and the truth.

    Flips and 90-degree rotations are exact index remappings; the affine
    component resamples (bilinear for imagery and densities, nearest for
    masks). Deterministic given (inputs, seed, config).
    """
    rng = np.random.default_rng(seed)
    flip_h = config.flip_prob > 0 and rng.random() < config.flip_prob
    flip_v = config.flip_prob > 0 and rng.random() < config.flip_prob
    k_rot = int(rng.integers(4)) if config.rot90 else 0
    if config.affine:
        theta = np.deg2rad(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg))
        scale = rng.uniform(*config.scale_range)
        h, w = truth.spatial_shape
        ty = rng.uniform(-config.max_translate_frac, config.max_translate_frac) * h
        tx = rng.uniform(-config.max_translate_frac, config.max_translate_frac) * w
    if not flip_h and not flip_v and k_rot == 0 and not config.affine:
        return stack, truth

    def remap(img: np.ndarray) -> np.ndarray:
        out = img
        if flip_h:
            out = np.flip(out, axis=-1)
        if flip_v:
            out = np.flip(out, axis=-2)
        if k_rot:
            out = np.rot90(out, k=k_rot, axes=(-2, -1))
        return np.ascontiguousarray(out)

    data = remap(stack.data)
    values = remap(truth.values)
    if config.affine:
        matrix, offset = _affine_inverse(values.shape, theta, scale, (ty, tx))
        warped = np.empty_like(data)
        for t in range(data.shape[0]):
            for c in range(data.shape[1]):
                warped[t, c] = ndimage.affine_transform(
                    data[t, c], matrix, offset=offset, order=1, mode="nearest"
                )
        data = warped
        order = 0 if truth.kind == TruthKind.MASK else 1
        values = ndimage.affine_transform(
            values, matrix, offset=offset, order=order, mode="constant", cval=0.0
        ).astype(np.float32)
        if truth.kind == TruthKind.DENSITY:
            values = np.clip(values, 0.0, 1.0)
    return (
        replace(stack, data=data.astype(np.float32)),
        replace(truth, values=values.astype(np.float32)),
    )


def _affine_inverse(shape, theta, scale, translate):
    """Output->input mapping for rotate/scale about center plus translation."""
    h, w = shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    cos, sin = np.cos(theta), np.sin(theta)
    forward = scale * np.array([[cos, -sin], [sin, cos]])
    inverse = np.linalg.inv(forward)
    offset = center - inverse @ (center + np.asarray(translate))
    return inverse, offset
