"""Procedural multi-revisit datasets with a static target and moving nuisance.

Each location has one fixed scene (textured background, optionally a compact
bright-ish target blob with a distinct per-band spectral offset). Revisits
share the scene but differ by per-revisit brightness jitter and cloud-like
circular occlusions that overwrite pixels. Occlusions are resampled until
every target pixel is visible in at least one revisit, which is what gives
multi-revisit fusion a real information advantage over any single image.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import (
    DatasetManifest,
    GroundTruth,
    LocationEntry,
    RevisitStack,
    TruthKind,
    assign_splits,
    save_location,
    save_manifest,
)

# Synthetic bands reuse Sentinel-2 names so band selection (e.g. an RGB-only
# ablation) works unchanged on generated data.
SYNTHETIC_BAND_ORDER = (
    "B2", "B3", "B4", "B8", "B5", "B6", "B7", "B8A", "B11", "B12", "B1", "B9", "B10",
)

_SIGNATURE_CYCLE = (1600.0, -500.0, 900.0, 2400.0)

MAX_OCCLUSION_RESAMPLES = 64


class GenerationError(RuntimeError):
    """The generator could not satisfy its visibility guarantee."""


@dataclass(frozen=True)
class SyntheticParams:
    n_locations: int = 400
    n_revisits: int = 4
    n_bands: int = 4
    height: int = 64
    width: int = 64
    target_fraction_range: tuple[float, float] = (0.03, 0.12)
    occlusion_prob: float = 0.3
    occlusion_radius_range: tuple[float, float] = (10.0, 18.0)
    brightness_jitter_std: float = 100.0
    spectral_signature: tuple[float, ...] | None = None
    negative_fraction: float = 0.1
    truth_kind: TruthKind = TruthKind.MASK
    train_fraction: float = 0.8
    background_range: tuple[float, float] = (800.0, 1200.0)
    background_noise_std: float = 80.0
    cloud_offset: float = 6000.0
    density_sigma: float = 2.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "truth_kind", TruthKind(self.truth_kind))
        if self.n_locations < 1 or self.n_revisits < 1 or self.n_bands < 1:
            raise ValueError("n_locations, n_revisits and n_bands must be >= 1")
        if self.n_bands > len(SYNTHETIC_BAND_ORDER):
            raise ValueError(f"at most {len(SYNTHETIC_BAND_ORDER)} bands supported")
        lo, hi = self.target_fraction_range
        if not (0.0 < lo < hi < 1.0):
            raise ValueError("target_fraction_range must satisfy 0 < lo < hi < 1")
        if not 0.0 <= self.occlusion_prob < 1.0:
            raise ValueError("occlusion_prob must be in [0, 1)")
        if not 0.0 <= self.negative_fraction < 1.0:
            raise ValueError("negative_fraction must be in [0, 1)")
        if self.brightness_jitter_std < 0:
            raise ValueError("brightness_jitter_std must be >= 0")
        if self.spectral_signature is not None:
            sig = tuple(float(v) for v in self.spectral_signature)
            if len(sig) != self.n_bands:
                raise ValueError("spectral_signature must have one offset per band")
            object.__setattr__(self, "spectral_signature", sig)

    @property
    def band_names(self) -> tuple[str, ...]:
        return SYNTHETIC_BAND_ORDER[: self.n_bands]

    @property
    def signature(self) -> np.ndarray:
        if self.spectral_signature is not None:
            return np.asarray(self.spectral_signature, dtype=np.float32)
        cycle = np.resize(np.asarray(_SIGNATURE_CYCLE), self.n_bands)
        return cycle.astype(np.float32)


@dataclass(frozen=True)
class LocationRender:
    """Generator internals kept around for oracles and invariants."""

    stack: RevisitStack
    truth: GroundTruth
    clean_scene: np.ndarray  # [C, H, W]; scene without jitter/occlusions
    occlusion: np.ndarray  # [T, H, W] bool, True where a cloud overwrote
    negative: bool


def _rounded_rect_mask(h, w, top, left, rect_h, rect_w) -> np.ndarray:
    radius = max(1.0, min(rect_h, rect_w) / 4.0)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    # Distance from each pixel to the rectangle shrunk by the corner radius.
    cy0, cy1 = top + radius, top + rect_h - 1 - radius
    cx0, cx1 = left + radius, left + rect_w - 1 - radius
    dy = np.maximum(np.maximum(cy0 - rows, rows - cy1), 0.0)
    dx = np.maximum(np.maximum(cx0 - cols, cols - cx1), 0.0)
    return dy * dy + dx * dx <= radius * radius


def _disk_mask(h, w, center_y, center_x, radius) -> np.ndarray:
    rows = np.arange(h)[:, None] - center_y
    cols = np.arange(w)[None, :] - center_x
    return rows * rows + cols * cols <= radius * radius


def render_location(
    params: SyntheticParams, location_seed: int, negative: bool = False
) -> LocationRender:
    """Render one location deterministically from (params, location_seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, location_seed]))
    c, h, w = params.n_bands, params.height, params.width
    t = params.n_revisits

    base = rng.uniform(*params.background_range, size=c).astype(np.float32)
    texture = rng.normal(0.0, params.background_noise_std, size=(c, h, w))
    clean = np.clip(base[:, None, None] + texture, 0.0, None).astype(np.float32)

    target = np.zeros((h, w), dtype=bool)
    if not negative:
        fraction = rng.uniform(*params.target_fraction_range)
        area = fraction * h * w
        aspect = rng.uniform(0.6, 1.6)
        rect_h = int(np.clip(round(np.sqrt(area * aspect)), 3, h - 2))
        rect_w = int(np.clip(round(area / rect_h), 3, w - 2))
        top = int(rng.integers(1, h - rect_h))
        left = int(rng.integers(1, w - rect_w))
        target = _rounded_rect_mask(h, w, top, left, rect_h, rect_w)
        clean = clean + params.signature[:, None, None] * target.astype(np.float32)
        clean = np.clip(clean, 0.0, None).astype(np.float32)

    jitter = rng.normal(0.0, params.brightness_jitter_std, size=(t, c)).astype(
        np.float32
    )
    if params.brightness_jitter_std == 0:
        jitter = np.zeros((t, c), dtype=np.float32)

    occlusion = _sample_occlusions(params, rng, target)

    stack = np.empty((t, c, h, w), dtype=np.float32)
    for k in range(t):
        img = np.clip(clean + jitter[k][:, None, None], 0.0, None)
        if occlusion[k].any():
            cloud_value = (base + params.cloud_offset)[:, None]
            img[:, occlusion[k]] = cloud_value
        stack[k] = img

    if params.truth_kind == TruthKind.MASK:
        truth_values = target.astype(np.float32)
    else:
        truth_values = _density_from_mask(target, params.density_sigma)

    return LocationRender(
        stack=RevisitStack(
            data=stack,
            band_names=params.band_names,
            location_id=f"seed{location_seed}",
        ),
        truth=GroundTruth(kind=params.truth_kind, values=truth_values),
        clean_scene=clean,
        occlusion=occlusion,
        negative=negative,
    )


def _sample_occlusions(
    params: SyntheticParams, rng: np.random.Generator, target: np.ndarray
) -> np.ndarray:
    """Per-revisit cloud masks; every target pixel stays visible somewhere."""
    t, h, w = params.n_revisits, params.height, params.width
    r_lo, r_hi = params.occlusion_radius_range
    for _ in range(MAX_OCCLUSION_RESAMPLES):
        occlusion = np.zeros((t, h, w), dtype=bool)
        for k in range(t):
            if rng.random() < params.occlusion_prob:
                cy = rng.uniform(0, h - 1)
                cx = rng.uniform(0, w - 1)
                radius = rng.uniform(r_lo, r_hi)
                occlusion[k] = _disk_mask(h, w, cy, cx, radius)
        if not target.any():
            return occlusion
        always_hidden = occlusion.all(axis=0) & target
        if not always_hidden.any():
            return occlusion
    raise GenerationError(
        f"could not expose every target pixel within {MAX_OCCLUSION_RESAMPLES} "
        "occlusion resamples; lower occlusion_prob or radius"
    )


def _density_from_mask(mask: np.ndarray, sigma: float) -> np.ndarray:
    if not mask.any():
        return np.zeros_like(mask, dtype=np.float32)
    blurred = ndimage.gaussian_filter(mask.astype(np.float64), sigma=sigma)
    return (blurred / blurred.max()).astype(np.float32)


def generate_location(
    params: SyntheticParams, location_seed: int, negative: bool = False
) -> tuple[RevisitStack, GroundTruth]:
    render = render_location(params, location_seed, negative=negative)
    return render.stack, render.truth


def generate_dataset(params: SyntheticParams, out_dir: Path | str) -> DatasetManifest:
    """Materialize a full dataset in the on-disk layout and return its manifest.

    Also writes ``manifest.json`` and a ``params.json`` provenance record.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n = params.n_locations
    n_negative = int(round(params.negative_fraction * n))
    assign_rng = np.random.default_rng(np.random.SeedSequence([params.seed, n]))
    negative_ids = set(assign_rng.permutation(n)[:n_negative].tolist())
    splits = assign_splits(n, params.train_fraction, seed=params.seed)

    entries = []
    for i in range(n):
        location_id = f"loc_{i:04d}"
        render = render_location(params, location_seed=i, negative=i in negative_ids)
        save_location(out_dir / location_id, render.stack, render.truth)
        entries.append(
            LocationEntry(
                location_id=location_id,
                revisits=tuple(
                    f"{location_id}/revisit_{k}.npy" for k in range(params.n_revisits)
                ),
                truth=f"{location_id}/truth.npy",
                split=splits[i],
                negative=i in negative_ids,
            )
        )

    manifest = DatasetManifest(
        root=out_dir, entries=tuple(entries), truth_kind=params.truth_kind
    )
    save_manifest(manifest, out_dir / "manifest.json")
    provenance = asdict(params)
    provenance["truth_kind"] = params.truth_kind.value
    (out_dir / "params.json").write_text(json.dumps(provenance, indent=2) + "\n")
    return manifest
