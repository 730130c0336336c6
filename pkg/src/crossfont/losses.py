"""Composite training objective: cross-entropy, symmetric KL consistency
between the two branches, and cross-branch batch-hard triplet loss, combined
as total = cel + kl + alpha * tl (alpha defaults to 5, margin to 0.3).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ContractViolation, NumericError

PROB_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    cel: float
    kl: float
    tl: float
    total: float
    alpha: float
    margin: float

    def to_dict(self) -> dict:
        return {"cel": self.cel, "kl": self.kl, "tl": self.tl,
                "total": self.total, "alpha": self.alpha, "margin": self.margin}


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -log softmax-probability of the true class."""
    if logits.ndim != 2:
        raise ContractViolation(f"logits must be B x N, got shape {tuple(logits.shape)}")
    n = logits.shape[1]
    if targets.min() < 0 or targets.max() >= n:
        raise ContractViolation(f"targets must lie in [0, {n}), got range "
                                f"[{int(targets.min())}, {int(targets.max())}]")
    logp = F.log_softmax(logits, dim=1)
    return -logp[torch.arange(logits.shape[0]), targets].mean()


def triplet_loss(anchor: torch.Tensor, positive: torch.Tensor,
                 negative: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Hinge on the L2 distance gap, averaged over the given triplets."""
    if anchor.shape != positive.shape or anchor.shape != negative.shape:
        raise ContractViolation("anchor/positive/negative must share a shape")
    if anchor.ndim == 1:
        anchor, positive, negative = (t[None] for t in (anchor, positive, negative))
    d_pos = (anchor - positive).norm(dim=-1)
    d_neg = (anchor - negative).norm(dim=-1)
    return torch.clamp(d_pos - d_neg + margin, min=0.0).mean()


def symmetric_kl(logits_p: torch.Tensor, logits_q: torch.Tensor) -> torch.Tensor:
    """0.5 * [KL(P||Q) + KL(Q||P)] over softmax distributions, batch mean.

    Probabilities are floored at 1e-12 inside the logs for stability.
    """
    if logits_p.shape != logits_q.shape:
        raise ContractViolation("branch logits must share a shape")
    p = F.softmax(logits_p, dim=-1)
    q = F.softmax(logits_q, dim=-1)
    logp = p.clamp_min(PROB_FLOOR).log()
    logq = q.clamp_min(PROB_FLOOR).log()
    kl_pq = (p * (logp - logq)).sum(dim=-1)
    kl_qp = (q * (logq - logp)).sum(dim=-1)
    return (0.5 * (kl_pq + kl_qp)).mean().clamp_min(0.0)


def total_loss(cel, kl, tl, alpha: float = 5.0, margin: float = 0.3) -> LossBreakdown:
    """Combine components into the weighted total; rejects non-finite parts."""
    parts = {"cel": float(cel), "kl": float(kl), "tl": float(tl)}
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NumericError(f"loss component {name} is non-finite ({value})")
    total = parts["cel"] + parts["kl"] + alpha * parts["tl"]
    return LossBreakdown(cel=parts["cel"], kl=parts["kl"], tl=parts["tl"],
                         total=total, alpha=alpha, margin=margin)


def mine_triplets(embeddings: torch.Tensor, labels: torch.Tensor,
                  branch_tags: torch.Tensor, mode: str = "hard") -> list[tuple[int, int, int]]:
    """Cross-branch triplet mining over a batch of embeddings.

    "hard": per anchor, the farthest same-class and the nearest different-class
    sample from the opposite branch. "all": every valid cross-branch triplet.
    A batch without both a positive and a negative for any anchor yields an
    empty list (callers log tl = 0).
    """
    if embeddings.ndim != 2:
        raise ContractViolation("embeddings must be B x D")
    b = embeddings.shape[0]
    if labels.shape[0] != b or branch_tags.shape[0] != b:
        raise ContractViolation("labels/branch_tags must match the batch size")
    if len(set(labels.tolist())) < 2:
        return []
    with torch.no_grad():
        dist = torch.cdist(embeddings, embeddings)
    labels_l = labels.tolist()
    tags_l = branch_tags.tolist()
    triplets: list[tuple[int, int, int]] = []
    for a in range(b):
        pos = [j for j in range(b) if tags_l[j] != tags_l[a] and labels_l[j] == labels_l[a]]
        neg = [j for j in range(b) if tags_l[j] != tags_l[a] and labels_l[j] != labels_l[a]]
        if not pos or not neg:
            continue
        if mode == "hard":
            p = max(pos, key=lambda j: (float(dist[a, j]), -j))
            n = min(neg, key=lambda j: (float(dist[a, j]), j))
            triplets.append((a, p, n))
        elif mode == "all":
            triplets.extend((a, p, n) for p in pos for n in neg)
        else:
            raise ContractViolation(f"unknown mining mode {mode!r}")
    return triplets


def mined_triplet_loss(embeddings: torch.Tensor, labels: torch.Tensor,
                       branch_tags: torch.Tensor, margin: float = 0.3,
                       mode: str = "hard") -> tuple[torch.Tensor, int]:
    """Mine triplets and compute the averaged hinge; returns (loss, n_triplets)."""
    triplets = mine_triplets(embeddings, labels, branch_tags, mode=mode)
    if not triplets:
        return embeddings.new_zeros(()), 0
    a_idx = torch.tensor([t[0] for t in triplets])
    p_idx = torch.tensor([t[1] for t in triplets])
    n_idx = torch.tensor([t[2] for t in triplets])
    loss = triplet_loss(embeddings[a_idx], embeddings[p_idx], embeddings[n_idx], margin)
    return loss, len(triplets)
