"""Multiscale feature fusion: interleaved conv-BN-ReLU paths over the two
encoder scales, CBAM attention, residual re-injection, and mean pooling.

The fused map has 2C channels at the anchor scale's resolution; a 1x1
projection brings it back to C so it can be residually added to each
original per-scale map before pooling.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractViolation, NumericError


class ConvBNReLU(nn.Module):
    """kxk conv (spatial-preserving padding) + BatchNorm + ReLU."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel_size=kernel, padding=kernel // 2)
        self.bn = nn.BatchNorm2d(c_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.bn(self.conv(x)))


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, min(4, channels))
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    def __init__(self, kernel: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size=kernel, padding=kernel // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        avg = x.mean(dim=1, keepdim=True)
        mx = x.max(dim=1, keepdim=True).values
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


class CBAM(nn.Module):
    """Channel gate then spatial gate, both multiplicative sigmoid gates."""

    def __init__(self, channels: int, reduction: int = 16, spatial_kernel: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(spatial_kernel)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x * self.channel(x)
        return x * self.spatial(x)


def _resample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if x.shape[-2:] == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ScalePairFusion(nn.Module):
    """Two symmetric fusion paths over the anchor-scale map and the other
    scale's map resampled to the anchor resolution; output has 2C channels.

    path A = f2(cat(f1(anchor), other_at_anchor))
    path B = g2(cat(g1(other_at_anchor), anchor))
    """

    def __init__(self, channels: int):
        super().__init__()
        self.pre_a = ConvBNReLU(channels, channels)
        self.post_a = ConvBNReLU(2 * channels, channels)
        self.pre_b = ConvBNReLU(channels, channels)
        self.post_b = ConvBNReLU(2 * channels, channels)
        self.channels = channels

    def forward(self, anchor: torch.Tensor, other: torch.Tensor,
                expected_ratio: float | None = None) -> torch.Tensor:
        if anchor.shape[1] != self.channels or other.shape[1] != self.channels:
            raise ContractViolation(
                f"fusion built for C={self.channels}, got {anchor.shape[1]}/{other.shape[1]}")
        if expected_ratio is not None:
            want = (round(anchor.shape[-2] * expected_ratio), round(anchor.shape[-1] * expected_ratio))
            if tuple(other.shape[-2:]) != want:
                raise ContractViolation(
                    f"other-scale map is {tuple(other.shape[-2:])}, expected {want} "
                    f"(ratio {expected_ratio} of anchor {tuple(anchor.shape[-2:])})")
        other = _resample(other, anchor.shape[-2:])
        path_a = self.post_a(torch.cat([self.pre_a(anchor), other], dim=1))
        path_b = self.post_b(torch.cat([self.pre_b(other), anchor], dim=1))
        return torch.cat([path_a, path_b], dim=1)


def fuse(module: ScalePairFusion, full: torch.Tensor, half: torch.Tensor) -> torch.Tensor:
    """Classic two-scale entry point: ``half`` must be exactly half resolution."""
    return module(full, half, expected_ratio=0.5)


class FeatureIntegrator(nn.Module):
    """Fuse the two per-scale encoder maps and return pooled per-scale vectors.

    The attention-enhanced fused map is projected back to C channels and
    residually added to each original map (resampled to that scale) before
    spatial mean pooling. With all weights zeroed the residual path reduces
    the output to the plain spatial mean of each encoder map.
    """

    def __init__(self, channels: int, scales=(0.5, 1.0), reduction: int = 16):
        super().__init__()
        self.scales = tuple(sorted(float(s) for s in scales))
        self.anchor = 1.0 if 1.0 in self.scales else min(self.scales)
        self.fusion = ScalePairFusion(channels)
        self.cbam = CBAM(2 * channels, reduction=reduction)
        self.project = ConvBNReLU(2 * channels, channels, kernel=1)
        self.channels = channels

    def enhanced_maps(self, maps: dict[float, torch.Tensor]) -> dict[float, torch.Tensor]:
        if set(float(k) for k in maps) != set(self.scales):
            raise ContractViolation(f"expected scales {self.scales}, got {sorted(maps)}")
        other_scale = next(s for s in self.scales if s != self.anchor)
        anchor_map = maps[self.anchor]
        other_map = maps[other_scale]
        ratio = other_scale / self.anchor
        fused = self.fusion(anchor_map, other_map, expected_ratio=ratio)
        g = self.project(self.cbam(fused))
        return {
            self.anchor: anchor_map + g,
            other_scale: other_map + _resample(g, other_map.shape[-2:]),
        }

    def forward(self, maps: dict[float, torch.Tensor]) -> dict[float, torch.Tensor]:
        pooled = {k: e.mean(dim=(2, 3)) for k, e in self.enhanced_maps(maps).items()}
        for k, v in pooled.items():
            if not torch.isfinite(v).all():
                raise NumericError(f"feature integration produced non-finite values at scale {k}")
        return pooled


def mean_pool(maps: dict[float, torch.Tensor]) -> dict[float, torch.Tensor]:
    """Fusion-bypass path: plain spatial mean of each encoder map."""
    return {float(k): m.mean(dim=(2, 3)) for k, m in maps.items()}
