"""U-Net with a residual-block encoder and per-scale temporal fusion.

The encoder emits features at H/4, H/8, H/16 and H/32. Under multi-revisit
input every one of those tensors (skips included) is maxed over revisits
before the decoder consumes it.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .base import FusionSegmenter
from .blocks import ConvBNReLU, ResidualBlock, UpsampleBlock


class UNet(FusionSegmenter):
    def __init__(
        self,
        in_channels: int,
        widths: tuple[int, int, int, int] = (32, 64, 128, 256),
        head: str = "segmentation",
    ):
        super().__init__(in_channels, head)
        w1, w2, w3, w4 = widths
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, w1, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(w1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.layer1 = self._make_layer(w1, w1, stride=1)
        self.layer2 = self._make_layer(w1, w2, stride=2)
        self.layer3 = self._make_layer(w2, w3, stride=2)
        self.layer4 = self._make_layer(w3, w4, stride=2)

        self.up3 = nn.ConvTranspose2d(w4, w3, 2, stride=2)
        self.dec3 = nn.Sequential(ConvBNReLU(2 * w3, w3), ConvBNReLU(w3, w3))
        self.up2 = nn.ConvTranspose2d(w3, w2, 2, stride=2)
        self.dec2 = nn.Sequential(ConvBNReLU(2 * w2, w2), ConvBNReLU(w2, w2))
        self.up1 = nn.ConvTranspose2d(w2, w1, 2, stride=2)
        self.dec1 = nn.Sequential(ConvBNReLU(2 * w1, w1), ConvBNReLU(w1, w1))
        tail_w = max(w1 // 2, 8)
        self.tail = nn.Sequential(
            UpsampleBlock(w1, tail_w), UpsampleBlock(tail_w, tail_w)
        )
        self.head = nn.Conv2d(tail_w, 1, 1)

    @staticmethod
    def _make_layer(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
        return nn.Sequential(
            ResidualBlock(in_ch, out_ch, stride=stride),
            ResidualBlock(out_ch, out_ch),
        )

    def encode(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(images)          # [B, w1, H/4, W/4]
        f1 = self.layer1(x)            # H/4
        f2 = self.layer2(f1)           # H/8
        f3 = self.layer3(f2)           # H/16
        f4 = self.layer4(f3)           # H/32
        return [f1, f2, f3, f4]

    def decode(self, features: list[torch.Tensor]) -> torch.Tensor:
        f1, f2, f3, f4 = features
        d = self.dec3(torch.cat([self.up3(f4), f3], dim=1))
        d = self.dec2(torch.cat([self.up2(d), f2], dim=1))
        d = self.dec1(torch.cat([self.up1(d), f1], dim=1))
        return self.head(self.tail(d))
