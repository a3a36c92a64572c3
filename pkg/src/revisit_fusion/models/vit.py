"""Plain ViT encoder with a sequential upsampling decoder.

The encoder turns each revisit into a patch-token grid; grids are fused
across revisits by a temporal max and decoded with 2x upsampling blocks
(ConvTranspose -> Conv2d -> BatchNorm -> Dropout -> ReLU), recovering the
full input resolution from the patch grid.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .base import FusionSegmenter
from .blocks import UpsampleBlockRegularized
from .swin import Mlp, _init_transformer_weights


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int, qkv_bias: bool = True):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = (
            self.qkv(x)
            .reshape(b, n, 3, self.num_heads, c // self.num_heads)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv.unbind(0)
        attn = ((q * self.scale) @ k.transpose(-2, -1)).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class ViTBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PlainViT(FusionSegmenter):
    def __init__(
        self,
        in_channels: int,
        embed_dim: int = 192,
        depth: int = 6,
        num_heads: int = 6,
        patch_size: int = 16,
        img_size: int = 224,
        dropout: float = 0.1,
        head: str = "segmentation",
    ):
        super().__init__(in_channels, head)
        n_up = math.log2(patch_size)
        if n_up != int(n_up):
            raise ValueError("patch_size must be a power of two")
        self.patch_size = patch_size
        self.grid_size = img_size // patch_size
        self.patch_embed = nn.Conv2d(in_channels, embed_dim, patch_size, stride=patch_size)
        self.pos_embed = nn.Parameter(
            torch.zeros(1, self.grid_size * self.grid_size, embed_dim)
        )
        self.blocks = nn.ModuleList(
            ViTBlock(embed_dim, num_heads) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(embed_dim)

        widths = (128, 64, 32, 16)
        ups, prev = [], embed_dim
        for i in range(int(n_up)):
            width = widths[min(i, len(widths) - 1)]
            ups.append(UpsampleBlockRegularized(prev, width, dropout))
            prev = width
        self.decoder = nn.Sequential(*ups)
        self.head = nn.Conv2d(prev, 1, 1)
        self.apply(_init_transformer_weights)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    @property
    def spatial_divisor(self) -> int:
        return self.patch_size

    def _positions(self, h: int, w: int) -> torch.Tensor:
        g = self.grid_size
        if (h, w) == (g, g):
            return self.pos_embed
        # bicubic resampling onto the requested token grid
        grid = self.pos_embed.reshape(1, g, g, -1).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(h, w), mode="bicubic", align_corners=False)
        return grid.permute(0, 2, 3, 1).reshape(1, h * w, -1)

    def encode(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = self.patch_embed(images)  # [B, D, H/p, W/p]
        b, d, h, w = x.shape
        x = x.flatten(2).transpose(1, 2) + self._positions(h, w)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return [x.transpose(1, 2).reshape(b, d, h, w)]

    def decode(self, features: list[torch.Tensor]) -> torch.Tensor:
        return self.head(self.decoder(features[0]))
