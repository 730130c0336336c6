"""Shared-weight convolutional encoder and dual-resolution input handling.

One encoder instance serves both siamese branches; callers pass images from
either branch through the same module, which is what makes the weights shared.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderSpec
from .errors import ConfigError, ContractViolation


def make_scales(images: torch.Tensor, scales=(0.5, 1.0)) -> dict[float, torch.Tensor]:
    """Produce the per-scale input dict {scale: B x C x (H*s) x (W*s)}.

    Scale 1.0 is the input itself; other scales are bilinear resamples
    (half-pixel centers, no anti-aliasing). Sides must stay even integers.
    """
    if images.ndim != 4:
        raise ContractViolation(f"expected B x C x H x W input, got shape {tuple(images.shape)}")
    h, w = images.shape[-2:]
    if h % 2 != 0 or w % 2 != 0:
        raise ConfigError(f"input sides must be even, got {h}x{w}")
    out: dict[float, torch.Tensor] = {}
    for s in scales:
        s = float(s)
        if s == 1.0:
            out[s] = images
            continue
        th, tw = h * s, w * s
        if abs(th - round(th)) > 1e-9 or abs(tw - round(tw)) > 1e-9:
            raise ConfigError(f"scale {s} of {h}x{w} is not an integer size")
        out[s] = F.interpolate(images, size=(int(round(th)), int(round(tw))),
                               mode="bilinear", align_corners=False)
    return out


class ConvStage(nn.Sequential):
    """conv + BN + ReLU; stride-4 stages patchify with a 4x4 kernel."""

    def __init__(self, c_in: int, c_out: int, stride: int):
        if stride == 4:
            conv = nn.Conv2d(c_in, c_out, kernel_size=4, stride=4)
        elif stride == 2:
            conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1)
        elif stride == 1:
            conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=1, padding=1)
        else:
            raise ConfigError(f"unsupported stage stride {stride}")
        super().__init__(conv, nn.BatchNorm2d(c_out), nn.ReLU(inplace=True))


class ConvEncoder(nn.Module):
    """The small conv-stage family ('tiny', 'micro' presets)."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        stages = []
        c_in = spec.in_channels
        for c_out, stride in zip(spec.stage_channels, spec.stage_strides):
            stages.append(ConvStage(c_in, c_out, stride))
            c_in = c_out
        self.stages = nn.Sequential(*stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)


class ConvNeXtEncoder(nn.Module):
    """torchvision ConvNeXt feature extractor; grayscale inputs are replicated
    to three channels at the stem boundary."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        import torchvision.models as tvm

        factory = {
            "convnext_tiny": tvm.convnext_tiny,
            "convnext_small": tvm.convnext_small,
            "convnext_base": tvm.convnext_base,
        }[spec.name]
        net = factory(weights=None)
        if spec.pretrained_path:
            state = torch.load(spec.pretrained_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state, strict=False)
        self.features = net.features
        self.spec = spec

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return self.features(x)


def build_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.name.startswith("convnext"):
        return ConvNeXtEncoder(spec)
    return ConvEncoder(spec)


def encode(images: torch.Tensor, encoder: nn.Module, spec: EncoderSpec) -> torch.Tensor:
    """Run the encoder and verify the output shape contract (C, side/stride)."""
    h, w = images.shape[-2:]
    if h % spec.stride != 0 or w % spec.stride != 0:
        raise ContractViolation(f"input {h}x{w} not divisible by encoder stride {spec.stride}")
    out = encoder(images)
    expect = (images.shape[0], spec.channels, h // spec.stride, w // spec.stride)
    if tuple(out.shape) != expect:
        raise ContractViolation(f"encoder produced {tuple(out.shape)}, spec demands {expect}")
    return out
