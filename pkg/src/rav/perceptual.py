"""Randomized perceptual distance proxy.

A seed-fixed random multi-layer conv feature extractor with channel-unit
normalized features and per-layer mean squared distances, mimicking the
structure of learned perceptual metrics without pretrained weights. An
external LPIPS-style callable can be plugged in where one is available.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

_EPS = 1e-8


class PerceptualProxy(torch.nn.Module):
    """Frozen random conv pyramid; distance = sum over layers of mean squared
    difference between channel-unit-normalized features."""

    def __init__(self, seed: int = 0, channels=(16, 32, 32), in_channels: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        c_in = in_channels
        for c_out in channels:
            w = torch.randn(c_out, c_in, 3, 3, generator=gen) * (2.0 / (c_in * 9)) ** 0.5
            conv = torch.nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False)
            with torch.no_grad():
                conv.weight.copy_(w)
            conv.weight.requires_grad_(False)
            convs.append(conv)
            c_in = c_out
        self.convs = torch.nn.ModuleList(convs)

    def features(self, x: torch.Tensor):
        feats = []
        h = x * 2.0 - 1.0
        for conv in self.convs:
            w = conv.weight.to(h.dtype)
            h = F.leaky_relu(F.conv2d(h, w, stride=2, padding=1), 0.2)
            feats.append(h)
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Batched distance; inputs B x C x H x W in [0, 1]. Returns scalar mean."""
        total = None
        for fa, fb in zip(self.features(a), self.features(b)):
            ua = fa / torch.sqrt((fa ** 2).sum(dim=1, keepdim=True) + _EPS)
            ub = fb / torch.sqrt((fb ** 2).sum(dim=1, keepdim=True) + _EPS)
            d = ((ua - ub) ** 2).mean()
            total = d if total is None else total + d
        return total


_cache: dict = {}


def get_proxy(seed: int = 0) -> PerceptualProxy:
    if seed not in _cache:
        _cache[seed] = PerceptualProxy(seed=seed)
    return _cache[seed]
