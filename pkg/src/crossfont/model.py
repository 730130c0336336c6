"""Siamese retrieval model assembly and checkpoint serialization.

A single encoder/fusion/refinement stack serves both branches; "branch" is a
matter of which images a caller feeds, not of separate parameters. During
training the classifier head contributes logits; at test time only the
concatenated refined embedding is used.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbone import build_encoder, encode, make_scales
from .config import EncoderSpec, TrainConfig, encoder_spec
from .errors import ContractViolation
from .fusion import FeatureIntegrator, mean_pool
from .refine import ClassifierHead, RefinementHead, concat_feature, kaiming_init_

CHECKPOINT_VERSION = 1


@dataclass
class BranchOutput:
    pooled: dict[float, torch.Tensor]
    refined: dict[float, torch.Tensor] | None
    logits: torch.Tensor | None  # fused class prediction, training path only
    embedding: torch.Tensor  # concatenated, L2-normalized retrieval feature


class RetrievalModel(nn.Module):
    def __init__(self, config: TrainConfig, num_classes: int,
                 spec: EncoderSpec | None = None):
        super().__init__()
        config.validate()
        self.config = config
        self.spec = spec or encoder_spec(config.encoder, config.pretrained_path)
        self.num_classes = num_classes
        self.encoder = build_encoder(self.spec)
        c = self.spec.channels
        self.integrator = (FeatureIntegrator(c, scales=config.scales,
                                             reduction=config.cbam_reduction)
                           if config.mfi_enabled else None)
        if config.mrc_enabled:
            self.refiner = RefinementHead(c, scales=config.scales,
                                          embed_dim=config.embed_dim,
                                          dropout=config.dropout)
            self.classifier = ClassifierHead(config.embed_dim, num_classes)
        else:
            self.refiner = None
            self.classifier = None

    @property
    def embedding_dim(self) -> int:
        per_scale = self.config.embed_dim if self.refiner is not None else self.spec.channels
        return 2 * per_scale

    def init_weights(self, seed: int | None = None) -> None:
        kaiming_init_(self, self.config.seed if seed is None else seed)

    def forward_branch(self, images: torch.Tensor) -> BranchOutput:
        scaled = make_scales(images, self.config.scales)
        maps = {k: encode(img, self.encoder, self.spec) for k, img in scaled.items()}
        pooled = self.integrator(maps) if self.integrator is not None else mean_pool(maps)
        refined = self.refiner(pooled) if self.refiner is not None else None
        logits = self.classifier.fused_logits(refined) if self.classifier is not None else None
        embedding = concat_feature(refined if refined is not None else pooled)
        return BranchOutput(pooled=pooled, refined=refined, logits=logits, embedding=embedding)

    def forward(self, images: torch.Tensor) -> BranchOutput:
        return self.forward_branch(images)

    @torch.no_grad()
    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """Retrieval features; the classifier head plays no part here."""
        return self.forward_branch(images).embedding


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: RetrievalModel
    config: TrainConfig
    class_vocab: dict[int, int]  # class_id -> logit index
    epoch: int
    metrics: dict

    @property
    def inverse_vocab(self) -> dict[int, int]:
        return {v: k for k, v in self.class_vocab.items()}


def save_checkpoint(path: str, model: RetrievalModel, config: TrainConfig,
                    class_vocab: dict[int, int], epoch: int, metrics: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "encoder_spec": model.spec.to_dict(),
        "train_config": config.to_dict(),
        "class_vocab": {str(k): int(v) for k, v in class_vocab.items()},
        "num_classes": model.num_classes,
        "epoch": int(epoch),
        "metrics": metrics or {},
        "model_state": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path: str) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ContractViolation(f"checkpoint format version {version} unsupported "
                                f"(expected {CHECKPOINT_VERSION})")
    config = TrainConfig.from_dict(payload["train_config"])
    spec = EncoderSpec.from_dict(payload["encoder_spec"])
    model = RetrievalModel(config, num_classes=payload["num_classes"], spec=spec)
    model.load_state_dict(payload["model_state"])
    model.eval()
    vocab = {int(k): int(v) for k, v in payload["class_vocab"].items()}
    return Checkpoint(model=model, config=config, class_vocab=vocab,
                      epoch=payload["epoch"], metrics=payload["metrics"])


def _tensor_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().contiguous().numpy()
    return np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def checkpoint_hash(model: RetrievalModel, config: TrainConfig,
                    class_vocab: dict[int, int]) -> str:
    """Canonical content hash: config + vocabulary + every weight tensor's
    little-endian bytes in state-dict order. Stable across save/load cycles."""
    h = hashlib.sha256()
    h.update(json.dumps(config.to_dict(), sort_keys=True).encode())
    h.update(json.dumps({str(k): v for k, v in sorted(class_vocab.items())}).encode())
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(_tensor_bytes(t))
    return h.hexdigest()


def checkpoint_file_hash(path: str) -> str:
    ck = load_checkpoint(path)
    return checkpoint_hash(ck.model, ck.config, ck.class_vocab)
