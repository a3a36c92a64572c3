"""Shared forward contract for all revisit-fusing segmentation models.

Every backbone encodes each revisit independently, reduces the per-revisit
features with an elementwise temporal max, and decodes the fused features to
a full-resolution map. With T=1 the reduction is the identity, so the same
weights behave exactly like a single-image model.
"""

from __future__ import annotations

import torch
import torch.nn as nn


class ShapeError(ValueError):
    """Input tensor is incompatible with the model configuration."""


class FusionSegmenter(nn.Module):
    def __init__(self, in_channels: int, head: str = "segmentation"):
        super().__init__()
        if head not in ("segmentation", "density"):
            raise ValueError(f"unknown head {head!r}")
        self.in_channels = in_channels
        self.head_kind = head

    # subclasses: encode one batch of images -> per-scale feature list
    def encode(self, images: torch.Tensor) -> list[torch.Tensor]:
        raise NotImplementedError

    # subclasses: fused per-scale features -> [B, 1, H, W] raw map
    def decode(self, features: list[torch.Tensor]) -> torch.Tensor:
        raise NotImplementedError

    @property
    def spatial_divisor(self) -> int:
        return 32

    def _check_input(self, stack: torch.Tensor) -> torch.Tensor:
        if stack.dim() == 4:  # [T, C, H, W] convenience form
            stack = stack.unsqueeze(0)
        if stack.dim() != 5:
            raise ShapeError(f"expected [B, T, C, H, W] input, got {tuple(stack.shape)}")
        _, _, c, h, w = stack.shape
        if c != self.in_channels:
            raise ShapeError(f"model expects {self.in_channels} channels, got {c}")
        d = self.spatial_divisor
        if h % d or w % d:
            raise ShapeError(f"spatial dims {h}x{w} must be divisible by {d}")
        return stack

    def encode_fused(self, stack: torch.Tensor) -> list[torch.Tensor]:
        """Per-scale features after the temporal max over revisits."""
        stack = self._check_input(stack)
        b, t, c, h, w = stack.shape
        feats = self.encode(stack.reshape(b * t, c, h, w))
        fused = []
        for f in feats:
            f = f.reshape(b, t, *f.shape[1:])
            fused.append(torch.max(f, dim=1).values if t > 1 else f[:, 0])
        return fused

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        """[B, T, C, H, W] -> [B, 1, H, W]; a 4D stack returns [H, W]."""
        unbatched = stack.dim() == 4
        out = self.decode(self.encode_fused(stack))
        if self.head_kind == "density":
            out = torch.sigmoid(out)
        return out[0, 0] if unbatched else out

    def fusion_gap(self, stack: torch.Tensor) -> float:
        """Smallest margin between the max and runner-up across revisits.

        Used to detect ties before finite-difference gradient checks; with
        T=1 there is nothing to tie and the gap is infinite. Only positions
        whose runner-up is active (nonzero) are competitions between
        revisits; a runner-up clamped to exactly zero by a ReLU is that
        ReLU's kink, not a fusion tie, and carries no competing gradient.
        """
        stack = self._check_input(stack)
        b, t, c, h, w = stack.shape
        if t < 2:
            return float("inf")
        gap = float("inf")
        with torch.no_grad():
            feats = self.encode(stack.reshape(b * t, c, h, w))
            for f in feats:
                f = f.reshape(b, t, -1)
                top2 = torch.topk(f, k=2, dim=1).values
                margins = top2[:, 0] - top2[:, 1]
                live = top2[:, 1] != 0
                if live.any():
                    gap = min(gap, float(margins[live].min()))
        return gap
