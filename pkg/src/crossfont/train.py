"""Siamese training loop: cross-font pair batches, SGD with warmup + step
decay, composite loss, JSONL loss logging, and checkpointing.

An epoch makes one pass worth of steps over the eligible query-font images
(ceil(n_query / batch_size) steps); every step draws batch_size classes,
distinct where possible, and one image per font from each.
"""

from __future__ import annotations

import json
import logging
import math
import os
import random
from dataclasses import dataclass

import numpy as np
import torch

from . import losses as L
from .config import TrainConfig
from .data import (FONT_GALLERY, FONT_QUERY, ClassSplit, DatasetManifest,
                   ManifestEntry, augment, load_preprocessed)
from .errors import ConfigError, ManifestError, NumericError
from .model import RetrievalModel, checkpoint_hash, save_checkpoint

log = logging.getLogger(__name__)


def lr_at(epoch: int, config: TrainConfig) -> tuple[float, float]:
    """(backbone, head) learning rates for an epoch: linear warmup from 10% of
    base over warmup_epochs, then a decay_factor multiplier at each decay epoch."""
    if not 0 <= epoch < config.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.warmup_epochs > 0 and epoch < config.warmup_epochs:
        factor = 0.1 + 0.9 * (epoch / config.warmup_epochs)
    else:
        factor = 1.0
    for d in config.decay_epochs:
        if epoch >= d:
            factor *= config.decay_factor
    return config.lr_backbone * factor, config.lr_head * factor


@dataclass
class BatchCounters:
    skipped_classes: int = 0  # classes missing one font role
    repeated_class_batches: int = 0  # batches that had to reuse a class
    empty_triplet_steps: int = 0


class PairBatcher:
    """Draws batches of same-class (query image, gallery image) pairs."""

    def __init__(self, manifest: DatasetManifest, split: ClassSplit,
                 batch_size: int, rng: random.Random):
        by_class: dict[int, dict[str, list[ManifestEntry]]] = {}
        for e in manifest.entries:
            if e.class_id not in split.train_classes:
                continue
            by_class.setdefault(e.class_id, {FONT_QUERY: [], FONT_GALLERY: []})[e.font_id].append(e)
        self.counters = BatchCounters()
        self.pools = {}
        for cid, fonts in sorted(by_class.items()):
            if fonts[FONT_QUERY] and fonts[FONT_GALLERY]:
                self.pools[cid] = fonts
            else:
                self.counters.skipped_classes += 1
                log.warning("class %d lacks one font role; skipped from pairing", cid)
        if not self.pools:
            raise ManifestError("no training class has both font roles")
        self.classes = sorted(self.pools)
        self.batch_size = batch_size
        self.rng = rng
        self.num_query_images = sum(len(f[FONT_QUERY]) for f in self.pools.values())

    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(self.num_query_images / self.batch_size))

    def next_batch(self) -> list[tuple[ManifestEntry, ManifestEntry]]:
        if len(self.classes) >= self.batch_size:
            chosen = self.rng.sample(self.classes, self.batch_size)
        else:
            chosen = list(self.classes)
            while len(chosen) < self.batch_size:
                chosen.append(self.rng.choice(self.classes))
            self.counters.repeated_class_batches += 1
        batch = []
        for cid in chosen:
            q = self.rng.choice(self.pools[cid][FONT_QUERY])
            g = self.rng.choice(self.pools[cid][FONT_GALLERY])
            batch.append((q, g))
        return batch


class ImageStore:
    """Decodes and resizes each manifest image once, then serves from memory."""

    def __init__(self, manifest: DatasetManifest, input_size: int):
        self.manifest = manifest
        self.input_size = input_size
        self.cache: dict[str, np.ndarray] = {}

    def get(self, entry: ManifestEntry) -> np.ndarray:
        key = entry.path
        if key not in self.cache:
            self.cache[key] = load_preprocessed(self.manifest.resolve(entry), self.input_size)
        return self.cache[key]


@dataclass
class TrainResult:
    checkpoint_path: str
    loss_log: list[dict]
    model: RetrievalModel
    class_vocab: dict[int, int]
    counters: BatchCounters
    final_hash: str


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def build_vocab(split: ClassSplit) -> dict[int, int]:
    return {cid: i for i, cid in enumerate(sorted(split.train_classes))}


def train(config: TrainConfig, manifest: DatasetManifest, split: ClassSplit,
          out_dir: str) -> TrainResult:
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    if config.deterministic:
        set_determinism(config.seed)
    else:
        torch.manual_seed(config.seed)

    vocab = build_vocab(split)
    model = RetrievalModel(config, num_classes=len(vocab))
    model.init_weights(config.seed)
    model.train()

    decay, no_decay, head_decay, head_no_decay = [], [], [], []
    for name, p in model.named_parameters():
        is_backbone = name.startswith("encoder.")
        is_bias_or_bn = p.ndim <= 1
        if is_backbone:
            (no_decay if is_bias_or_bn else decay).append(p)
        else:
            (head_no_decay if is_bias_or_bn else head_decay).append(p)
    groups = [
        {"params": decay, "weight_decay": config.weight_decay, "role": "backbone"},
        {"params": no_decay, "weight_decay": 0.0, "role": "backbone"},
        {"params": head_decay, "weight_decay": config.weight_decay, "role": "head"},
        {"params": head_no_decay, "weight_decay": 0.0, "role": "head"},
    ]
    optimizer = torch.optim.SGD(groups, lr=config.lr_head, momentum=config.momentum)

    batcher = PairBatcher(manifest, split, config.batch_size, random.Random(config.seed))
    store = ImageStore(manifest, config.input_size)
    aug_rng = np.random.default_rng(config.seed)

    loss_log: list[dict] = []
    last_path = os.path.join(out_dir, "checkpoint_last.pt")
    final_path = os.path.join(out_dir, "checkpoint_final.pt")
    log_path = os.path.join(out_dir, "loss_log.jsonl")
    step = 0
    with open(log_path, "w", encoding="utf-8") as log_file:
        for epoch in range(config.epochs):
            lr_backbone, lr_head = lr_at(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr_backbone if group["role"] == "backbone" else lr_head
            for _ in range(batcher.steps_per_epoch()):
                batch = batcher.next_batch()
                images, targets = _assemble(batch, store, vocab, config, aug_rng)
                try:
                    record = _train_step(model, optimizer, images, targets, config,
                                         batcher.counters)
                except NumericError as e:
                    # weights have not been stepped on the bad batch
                    save_checkpoint(last_path, model, config, vocab, epoch)
                    raise NumericError(
                        f"{e}; last-good checkpoint kept at {last_path}") from e
                record.update({"step": step, "epoch": epoch, "lr": lr_head,
                               "lr_backbone": lr_backbone})
                loss_log.append(record)
                log_file.write(json.dumps(record) + "\n")
                step += 1
            if (epoch + 1) % config.checkpoint_every == 0 or epoch == config.epochs - 1:
                save_checkpoint(last_path, model, config, vocab, epoch)

    model.eval()
    metrics = {"final_total": loss_log[-1]["total"] if loss_log else None}
    save_checkpoint(final_path, model, config, vocab, config.epochs - 1, metrics)
    return TrainResult(checkpoint_path=final_path, loss_log=loss_log, model=model,
                       class_vocab=vocab, counters=batcher.counters,
                       final_hash=checkpoint_hash(model, config, vocab))


def _assemble(batch, store: ImageStore, vocab: dict[int, int], config: TrainConfig,
              rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    q_imgs, g_imgs, targets = [], [], []
    for q_entry, g_entry in batch:
        q_imgs.append(augment(store.get(q_entry), config.augment, rng))
        g_imgs.append(augment(store.get(g_entry), config.augment, rng))
        targets.append(vocab[q_entry.class_id])
    stack = np.stack(q_imgs + g_imgs)[:, None]  # 2B x 1 x H x W, query rows first
    return torch.from_numpy(stack), torch.tensor(targets, dtype=torch.long)


def _train_step(model: RetrievalModel, optimizer, images: torch.Tensor,
                targets: torch.Tensor, config: TrainConfig,
                counters: BatchCounters) -> dict:
    b = targets.shape[0]
    out = model.forward_branch(images)
    zero = images.new_zeros(())

    if model.classifier is not None:
        q_logits, g_logits = out.logits[:b], out.logits[b:]
        cel = L.cross_entropy(q_logits, targets) + L.cross_entropy(g_logits, targets)
        kl = L.symmetric_kl(q_logits, g_logits) if config.kl_enabled else zero
    else:
        cel, kl = zero, zero

    if config.triplet_enabled:
        labels = torch.cat([targets, targets])
        tags = torch.cat([torch.zeros(b, dtype=torch.long), torch.ones(b, dtype=torch.long)])
        tl, n_triplets = L.mined_triplet_loss(out.embedding, labels, tags,
                                              margin=config.margin, mode=config.mining)
        if n_triplets == 0:
            counters.empty_triplet_steps += 1
    else:
        tl = zero

    loss = cel + kl + config.alpha * tl
    breakdown = L.total_loss(float(cel), float(kl), float(tl),
                             alpha=config.alpha, margin=config.margin)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return breakdown.to_dict()
