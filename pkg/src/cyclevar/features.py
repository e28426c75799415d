"""Fixed random convolutional feature extractors.

Stand-ins for pretrained perceptual / inception / DINO networks: the
weights are drawn once from a seeded generator and never trained.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class RandomConvFeatures(nn.Module):
    def __init__(self, seed: int, channels: tuple[int, ...] = (16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_in = 3
        for i, c in enumerate(channels):
            conv = nn.Conv2d(c_in, c, 3, stride=1 if i == 0 else 2, padding=1)
            fan_in = c_in * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            layers.append(conv)
            c_in = c
        self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)
        self.out_channels = channels[-1]

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        x = img * 2 - 1
        feats = []
        for conv in self.layers:
            x = F.silu(conv(x))
            feats.append(x)
        return feats


class PerceptualProxy(nn.Module):
    """Mean L1 distance between random-conv features, averaged over layers."""

    def __init__(self, seed: int = 1234):
        super().__init__()
        self.net = RandomConvFeatures(seed)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        fa, fb = self.net(a), self.net(b)
        return sum((x - y).abs().mean() for x, y in zip(fa, fb)) / len(fa)
