"""Hierarchical windowed-attention backbone with an FPN + upsampling head.

Patch embedding (patch 4) feeds four stages of window attention, alternating
unshifted and half-window-shifted blocks, with patch merging between stages.
The stages emit feature maps at H/4, H/8, H/16 and H/32; after the temporal
max those are merged by a feature pyramid and upsampled back to full
resolution by ConvTranspose -> Conv2d -> ReLU blocks.

Inputs whose sides are not multiples of the window size are padded per
block; padding tokens get their own attention group so real tokens never
attend to them, which keeps outputs exact for any divisible-by-32 input.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .base import FusionSegmenter
from .blocks import FeaturePyramid, UpsampleBlock

_PAD_GROUP = 9  # canonical shift regions use groups 0..8


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """[B, H, W, C] -> [B * nWindows, ws*ws, C]; H, W multiples of ws."""
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def window_reverse(windows: torch.Tensor, ws: int, h: int, w: int) -> torch.Tensor:
    """Inverse of window_partition back to [B, H, W, C]."""
    b = windows.shape[0] // (h * w // ws // ws)
    x = windows.view(b, h // ws, w // ws, ws, ws, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


def _attention_groups(h, w, hp, wp, ws, shift) -> torch.Tensor:
    """Group id per cell of the padded, rolled canvas.

    Tokens may only attend within equal groups: the canonical 3x3 shift
    regions prevent wrap-around attention, and padded cells form their own
    group so no real token sees them.
    """
    groups = torch.zeros((hp, wp), dtype=torch.int64)
    if shift > 0:
        spans = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
        count = 0
        for hs in spans:
            for vs in spans:
                groups[hs, vs] = count
                count += 1
    if hp != h or wp != w:
        pad = torch.zeros((hp, wp), dtype=torch.bool)
        pad[h:, :] = True
        pad[:, w:] = True
        if shift > 0:
            pad = torch.roll(pad, shifts=(-shift, -shift), dims=(0, 1))
        groups = groups.masked_fill(pad, _PAD_GROUP)
    return groups


def _attention_mask(h, w, hp, wp, ws, shift, device, dtype):
    if shift == 0 and hp == h and wp == w:
        return None
    groups = _attention_groups(h, w, hp, wp, ws, shift)
    wins = window_partition(groups[None, :, :, None].float(), ws).squeeze(-1)
    diff = wins.unsqueeze(1) - wins.unsqueeze(2)
    mask = torch.zeros_like(diff).masked_fill(diff != 0, -100.0)
    return mask.to(device=device, dtype=dtype)


class WindowAttention(nn.Module):
    """Multi-head self-attention within a window, with relative position bias."""

    def __init__(self, dim: int, window_size: int, num_heads: int, qkv_bias=True):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.window_size = window_size

        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads)
        )
        coords = torch.stack(
            torch.meshgrid(
                torch.arange(window_size), torch.arange(window_size), indexing="ij"
            )
        ).flatten(1)
        relative = coords[:, :, None] - coords[:, None, :]  # [2, N, N]
        relative = relative.permute(1, 2, 0) + window_size - 1
        index = relative[..., 0] * (2 * window_size - 1) + relative[..., 1]
        self.register_buffer("relative_position_index", index)

        self.qkv = nn.Linear(dim, dim * 3, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        b, n, c = x.shape
        qkv = (
            self.qkv(x)
            .reshape(b, n, 3, self.num_heads, c // self.num_heads)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv.unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)  # [b, heads, n, n]
        bias = self.relative_position_bias_table[
            self.relative_position_index.reshape(-1)
        ].reshape(n, n, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(b // nw, nw, self.num_heads, n, n) + mask.unsqueeze(
                1
            ).unsqueeze(0)
            attn = attn.view(-1, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Mlp(nn.Sequential):
    def __init__(self, dim: int, ratio: float = 4.0):
        hidden = int(dim * ratio)
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class SwinBlock(nn.Module):
    def __init__(self, dim, num_heads, window_size, shifted: bool):
        super().__init__()
        self.window_size = window_size
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, length, c = x.shape
        assert length == h * w, "token count does not match the grid"
        ws = self.window_size
        # a single window has nothing to shift across
        shift = ws // 2 if self.shifted and (h > ws or w > ws) else 0

        shortcut = x
        x = self.norm1(x).view(b, h, w, c)
        hp = (h + ws - 1) // ws * ws
        wp = (w + ws - 1) // ws * ws
        x = F.pad(x, (0, 0, 0, wp - w, 0, hp - h))
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        mask = _attention_mask(h, w, hp, wp, ws, shift, x.device, x.dtype)
        x = self.attn(window_partition(x, ws), mask)
        x = window_reverse(x, ws, hp, wp)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        x = x[:, :h, :w].reshape(b, length, c)
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """2x downsampling by concatenating 2x2 neighborhoods, then 4C -> 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor, h: int, w: int):
        b, _, c = x.shape
        x = x.view(b, h, w, c)
        if h % 2 or w % 2:
            x = F.pad(x, (0, 0, 0, w % 2, 0, h % 2))
        x = torch.cat(
            [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]],
            dim=-1,
        )
        h2, w2 = (h + 1) // 2, (w + 1) // 2
        x = self.reduction(self.norm(x.view(b, h2 * w2, 4 * c)))
        return x, h2, w2


class HierarchicalWindowTransformer(FusionSegmenter):
    def __init__(
        self,
        in_channels: int,
        embed_dim: int = 32,
        depths: tuple[int, ...] = (2, 2, 2, 2),
        num_heads: tuple[int, ...] = (1, 2, 4, 8),
        window_size: int = 7,
        fpn_width: int = 64,
        head: str = "segmentation",
    ):
        super().__init__(in_channels, head)
        if len(depths) != 4 or len(num_heads) != 4:
            raise ValueError("expected exactly 4 stages")
        self.patch_embed = nn.Conv2d(in_channels, embed_dim, 4, stride=4)
        self.embed_norm = nn.LayerNorm(embed_dim)

        dims = [embed_dim * 2**i for i in range(4)]
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.stage_norms = nn.ModuleList()
        for i in range(4):
            self.stages.append(
                nn.ModuleList(
                    SwinBlock(dims[i], num_heads[i], window_size, shifted=bool(j % 2))
                    for j in range(depths[i])
                )
            )
            self.stage_norms.append(nn.LayerNorm(dims[i]))
            if i < 3:
                self.merges.append(PatchMerging(dims[i]))

        self.fpn = FeaturePyramid(dims, fpn_width)
        self.tail = nn.Sequential(
            UpsampleBlock(fpn_width, fpn_width // 2),
            UpsampleBlock(fpn_width // 2, fpn_width // 4),
        )
        self.head = nn.Conv2d(fpn_width // 4, 1, 1)
        self.apply(_init_transformer_weights)

    def encode(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = self.patch_embed(images)  # [B, D, H/4, W/4]
        b, c, h, w = x.shape
        x = self.embed_norm(x.flatten(2).transpose(1, 2))  # [B, L, D]
        features = []
        for i in range(4):
            for block in self.stages[i]:
                x = block(x, h, w)
            out = self.stage_norms[i](x)
            features.append(out.transpose(1, 2).reshape(b, -1, h, w))
            if i < 3:
                x, h, w = self.merges[i](x, h, w)
        return features

    def decode(self, features: list[torch.Tensor]) -> torch.Tensor:
        finest = self.fpn(features)[0]  # [B, fpn_width, H/4, W/4]
        return self.head(self.tail(finest))


def _init_transformer_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.zeros_(module.bias)
        nn.init.ones_(module.weight)
