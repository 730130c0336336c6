"""Per-scale refinement blocks, the shared classifier head, and the
concatenated retrieval feature.

Each scale gets its own linear+BN+dropout block mapping the pooled encoder
vector to the refined embedding (512-d by default). The classifier head is a
single linear layer shared across scales; its fused prediction is the mean of
the per-scale logits. Retrieval uses only the refined embeddings, concatenated
in ascending scale order and L2-normalized.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import ContractViolation


def scale_key(scale: float) -> str:
    return "s" + f"{float(scale):g}".replace(".", "_")


class LinearBlock(nn.Module):
    """linear -> BatchNorm1d -> dropout (dropout active only in train mode)."""

    def __init__(self, c_in: int, c_out: int, dropout: float = 0.5):
        super().__init__()
        self.linear = nn.Linear(c_in, c_out)
        self.bn = nn.BatchNorm1d(c_out)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.dropout(self.bn(self.linear(x)))


class RefinementHead(nn.Module):
    """One LinearBlock per scale, separate weights per scale."""

    def __init__(self, channels: int, scales=(0.5, 1.0), embed_dim: int = 512,
                 dropout: float = 0.5):
        super().__init__()
        self.scales = tuple(sorted(float(s) for s in scales))
        self.embed_dim = embed_dim
        self.blocks = nn.ModuleDict(
            {scale_key(s): LinearBlock(channels, embed_dim, dropout) for s in self.scales})

    def forward(self, pooled: dict[float, torch.Tensor]) -> dict[float, torch.Tensor]:
        if set(float(k) for k in pooled) != set(self.scales):
            raise ContractViolation(f"expected scales {self.scales}, got {sorted(pooled)}")
        return {s: self.blocks[scale_key(s)](pooled[s]) for s in self.scales}


class ClassifierHead(nn.Module):
    """Linear classifier shared across scales; fused logits = mean over scales."""

    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        self.linear = nn.Linear(embed_dim, num_classes)
        self.num_classes = num_classes

    def forward(self, refined: dict[float, torch.Tensor]) -> dict[float, torch.Tensor]:
        return {s: self.linear(v) for s, v in refined.items()}

    def fused_logits(self, refined: dict[float, torch.Tensor]) -> torch.Tensor:
        per_scale = self.forward(refined)
        return torch.stack(list(per_scale.values()), dim=0).mean(dim=0)


def concat_feature(vectors: dict[float, torch.Tensor], normalize: bool = True) -> torch.Tensor:
    """Concatenate per-scale vectors in ascending scale order; L2-normalize rows.

    The ordering is frozen: smaller scale first. Zero rows are returned
    unchanged rather than divided by zero.
    """
    parts = [vectors[s] for s in sorted(float(k) for k in vectors)]
    cat = torch.cat(parts, dim=-1)
    if not normalize:
        return cat
    norm = cat.norm(dim=-1, keepdim=True)
    return cat / norm.clamp_min(1e-12)


def kaiming_init_(module: nn.Module, seed: int = 0) -> None:
    """Kaiming-normal init for conv/linear weights (fan-in, ReLU gain), zero
    biases, unit-gain BN; deterministic under the seed."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1]
            if isinstance(m, nn.Conv2d):
                fan_in *= m.weight.shape[2] * m.weight.shape[3]
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen,
                                           dtype=m.weight.dtype) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
