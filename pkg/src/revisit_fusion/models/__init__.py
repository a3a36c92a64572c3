"""Model zoo: configuration, construction and checkpointing."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .base import FusionSegmenter, ShapeError
from .swin import HierarchicalWindowTransformer
from .unet import UNet
from .vit import PlainViT

__all__ = [
    "CheckpointBundle",
    "FusionSegmenter",
    "HierarchicalWindowTransformer",
    "ModelConfig",
    "ModelConfigError",
    "PlainViT",
    "ShapeError",
    "UNet",
    "build_model",
    "count_parameters",
    "load_checkpoint",
    "save_checkpoint",
]

FAMILIES = ("unet", "swin", "vit")
ENCODER_SIZES = ("small", "base", "large")

_UNET_WIDTHS = {
    "small": (16, 32, 64, 128),
    "base": (32, 64, 128, 256),
    "large": (48, 96, 192, 384),
}
_SWIN_PRESETS = {  # embed_dim, heads per stage
    "small": (24, (1, 2, 4, 8)),
    "base": (32, (1, 2, 4, 8)),
    "large": (48, (2, 4, 8, 16)),
}
_VIT_PRESETS = {  # embed_dim, depth, heads
    "small": (96, 4, 3),
    "base": (192, 6, 6),
    "large": (256, 8, 8),
}


class ModelConfigError(ValueError):
    """Unknown family/size or inconsistent architecture options."""


@dataclass(frozen=True)
class ModelConfig:
    """Declarative description of one segmentation model.

    Size-dependent fields left at None are filled from the encoder_size
    presets; setting them explicitly overrides the preset.
    """

    family: str
    in_channels: int
    head: str = "segmentation"
    encoder_size: str = "base"
    base_widths: tuple[int, int, int, int] | None = None  # unet
    embed_dim: int | None = None  # swin / vit
    depths: tuple[int, ...] | None = None  # swin stages
    depth: int | None = None  # vit
    num_heads: tuple[int, ...] | int | None = None
    window_size: int = 7
    patch_size: int = 16
    img_size: int = 224
    dropout: float = 0.1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelConfigError(
                f"unknown family {self.family!r}; expected one of {FAMILIES}"
            )
        if self.encoder_size not in ENCODER_SIZES:
            raise ModelConfigError(
                f"unknown encoder_size {self.encoder_size!r}; expected one of {ENCODER_SIZES}"
            )
        if self.in_channels < 1:
            raise ModelConfigError("in_channels must be >= 1")
        if self.head not in ("segmentation", "density"):
            raise ModelConfigError(f"unknown head {self.head!r}")
        for name in ("base_widths", "depths"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(value))
        if isinstance(self.num_heads, (list, tuple)):
            object.__setattr__(self, "num_heads", tuple(self.num_heads))


def build_model(config: ModelConfig, seed: int = 0) -> FusionSegmenter:
    """Construct a model with deterministic, seed-controlled initialization."""
    torch.manual_seed(seed)
    if config.family == "unet":
        widths = config.base_widths or _UNET_WIDTHS[config.encoder_size]
        return UNet(config.in_channels, widths=widths, head=config.head)
    if config.family == "swin":
        embed, heads = _SWIN_PRESETS[config.encoder_size]
        embed = config.embed_dim or embed
        heads = config.num_heads if config.num_heads is not None else heads
        if not isinstance(heads, tuple):
            raise ModelConfigError("swin num_heads must be one value per stage")
        depths = config.depths or (2, 2, 2, 2)
        return HierarchicalWindowTransformer(
            config.in_channels,
            embed_dim=embed,
            depths=depths,
            num_heads=heads,
            window_size=config.window_size,
            head=config.head,
        )
    embed, depth, heads = _VIT_PRESETS[config.encoder_size]
    embed = config.embed_dim or embed
    depth = config.depth or depth
    heads = config.num_heads if config.num_heads is not None else heads
    if not isinstance(heads, int):
        raise ModelConfigError("vit num_heads must be a single value")
    return PlainViT(
        config.in_channels,
        embed_dim=embed,
        depth=depth,
        num_heads=heads,
        patch_size=config.patch_size,
        img_size=config.img_size,
        dropout=config.dropout,
        head=config.head,
    )


def count_parameters(model: torch.nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass(frozen=True)
class CheckpointBundle:
    model: FusionSegmenter
    config: ModelConfig
    norm_spec: "NormalizationSpec | None" = None


def save_checkpoint(
    model: FusionSegmenter, config: ModelConfig, path, norm_spec=None
) -> None:
    """Single-file checkpoint: config header + parameters by layer path."""
    from .. import data as _data

    payload = {
        "config_json": json.dumps(asdict(config), sort_keys=True),
        "state_dict": model.state_dict(),
        "norm_spec": None if norm_spec is None else _data.norm_spec_to_dict(norm_spec),
    }
    torch.save(payload, Path(path))


def load_checkpoint(path) -> CheckpointBundle:
    """Rebuild the model and restore parameters bit-exactly (strict shapes)."""
    from .. import data as _data

    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    raw = json.loads(payload["config_json"])
    for key in ("base_widths", "depths", "num_heads"):
        if isinstance(raw.get(key), list):
            raw[key] = tuple(raw[key])
    config = ModelConfig(**raw)
    model = build_model(config)
    model.load_state_dict(payload["state_dict"], strict=True)
    spec = payload.get("norm_spec")
    return CheckpointBundle(
        model=model,
        config=config,
        norm_spec=None if spec is None else _data.norm_spec_from_dict(spec),
    )
