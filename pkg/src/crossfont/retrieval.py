"""Embedding extraction, exact gallery search, retrieval metrics, and the
binary embedding dump format.

Search is exact inner product over unit vectors (equivalently ascending L2);
ties break by gallery insertion order. Recall@Q% uses K = ceil(Q% of gallery),
clamped to at least 1. AP is the per-query mean of precision at each relevant
rank, averaged over queries that have at least one relevant gallery item.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .data import FONT_GALLERY, FONT_QUERY, FONT_ROLES, ClassSplit, DatasetManifest, load_preprocessed
from .errors import ContractViolation, ManifestError
from .model import RetrievalModel

UNKNOWN_CLASS = -1

EMB_MAGIC = b"GLYPHEMB"
EMB_VERSION = 1


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    class_id: int  # -1 when unknown/undeciphered
    font_id: str
    vector: np.ndarray  # float32, unit L2 norm

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float32)
        object.__setattr__(self, "vector", v)


class RetrievalIndex:
    """Immutable gallery of labeled embeddings supporting exact top-K search."""

    def __init__(self, records: list[EmbeddingRecord]):
        if not records:
            raise ContractViolation("cannot build an index from zero records")
        dims = {r.vector.shape[-1] for r in records}
        if len(dims) > 1:
            raise ContractViolation(f"records disagree on dimension: {sorted(dims)}")
        self.records = tuple(records)
        self.matrix = np.stack([r.vector for r in records]).astype(np.float32)
        self.matrix.setflags(write=False)
        self.class_ids = np.array([r.class_id for r in records], dtype=np.int64)
        self.class_ids.setflags(write=False)
        self.dim = int(self.matrix.shape[1])
        self.content_hash = hashlib.sha256(dump_bytes(list(records))).hexdigest()

    def __len__(self) -> int:
        return len(self.records)


def query(index: RetrievalIndex, vector: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k by inner product; returns (indices, scores), ties by
    gallery insertion order."""
    vector = np.asarray(vector, dtype=np.float32)
    if vector.shape != (index.dim,):
        raise ContractViolation(f"query vector has shape {vector.shape}, index dim {index.dim}")
    if not 1 <= k <= len(index):
        raise ContractViolation(f"k={k} outside [1, {len(index)}]")
    scores = index.matrix @ vector
    order = np.argsort(-scores, kind="stable")[:k]
    return order, scores[order]


def rank_all(index: RetrievalIndex, queries: np.ndarray) -> np.ndarray:
    """Full ranking matrix (num_queries x gallery_size) of gallery indices."""
    queries = np.asarray(queries, dtype=np.float32)
    if queries.ndim != 2 or queries.shape[1] != index.dim:
        raise ContractViolation(f"queries must be Q x {index.dim}")
    scores = queries @ index.matrix.T
    return np.argsort(-scores, axis=1, kind="stable")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def recall_at_k(rankings: np.ndarray, query_labels: np.ndarray,
                gallery_labels: np.ndarray, k: int) -> float:
    """Fraction of queries with >= 1 same-class gallery item in the top k."""
    if k < 1:
        raise ContractViolation("k must be >= 1")
    k = min(k, rankings.shape[1])
    top = gallery_labels[rankings[:, :k]]
    hits = (top == np.asarray(query_labels)[:, None]).any(axis=1)
    return float(hits.mean())


def percent_rank(gallery_size: int, q_percent: float = 1.0) -> int:
    return max(1, math.ceil(q_percent / 100.0 * gallery_size))


def recall_at_percent(rankings: np.ndarray, query_labels: np.ndarray,
                      gallery_labels: np.ndarray, q_percent: float = 1.0) -> float:
    return recall_at_k(rankings, query_labels, gallery_labels,
                       percent_rank(rankings.shape[1], q_percent))


def average_precision(rankings: np.ndarray, query_labels: np.ndarray,
                      gallery_labels: np.ndarray) -> tuple[float, int]:
    """Mean over queries of (1/R) * sum of precision at each relevant rank.

    Queries with no relevant gallery item are excluded; their count is the
    second return value.
    """
    gallery_labels = np.asarray(gallery_labels)
    aps = []
    excluded = 0
    for ranking, q_label in zip(rankings, np.asarray(query_labels)):
        rel = gallery_labels[ranking] == q_label
        r = int(rel.sum())
        if r == 0:
            excluded += 1
            continue
        ranks = np.flatnonzero(rel) + 1  # 1-indexed ranks of relevant items
        precision = np.arange(1, r + 1) / ranks
        aps.append(precision.sum() / r)
    if not aps:
        raise ContractViolation("no query has a relevant gallery item")
    return float(np.mean(aps)), excluded


@dataclass
class MetricsReport:
    recall_at_1: float
    recall_at_5: float
    recall_at_10: float
    recall_at_1pct: float
    ap: float
    num_queries: int
    num_gallery: int

    def to_dict(self) -> dict:
        return {
            "recall_at_1": self.recall_at_1,
            "recall_at_5": self.recall_at_5,
            "recall_at_10": self.recall_at_10,
            "recall_at_1pct": self.recall_at_1pct,
            "ap": self.ap,
            "num_queries": self.num_queries,
            "num_gallery": self.num_gallery,
        }

    def table(self, name: str = "model") -> str:
        header = f"{'Method':<16}  Recall@1  Recall@5  Recall@10  Recall@1%  AP"
        row = (f"{name:<16}  {self.recall_at_1 * 100:8.2f}  {self.recall_at_5 * 100:8.2f}  "
               f"{self.recall_at_10 * 100:9.2f}  {self.recall_at_1pct * 100:9.2f}  "
               f"{self.ap * 100:5.2f}")
        return header + "\n" + row


def compute_metrics(rankings: np.ndarray, query_labels: np.ndarray,
                    gallery_labels: np.ndarray) -> MetricsReport:
    ap, _ = average_precision(rankings, query_labels, gallery_labels)
    return MetricsReport(
        recall_at_1=recall_at_k(rankings, query_labels, gallery_labels, 1),
        recall_at_5=recall_at_k(rankings, query_labels, gallery_labels, 5),
        recall_at_10=recall_at_k(rankings, query_labels, gallery_labels, 10),
        recall_at_1pct=recall_at_percent(rankings, query_labels, gallery_labels, 1.0),
        ap=ap,
        num_queries=int(rankings.shape[0]),
        num_gallery=int(rankings.shape[1]),
    )


# ---------------------------------------------------------------------------
# embedding extraction / evaluation
# ---------------------------------------------------------------------------

@torch.no_grad()
def extract_embeddings(model: RetrievalModel, manifest: DatasetManifest,
                       entries=None, batch_size: int = 32
                       ) -> tuple[list[EmbeddingRecord], list[str]]:
    """One record per readable image; unreadable files are skipped and reported.

    Record ids are resolved file paths, so dumps stand alone for the service.
    """
    model.eval()
    entries = list(manifest.entries if entries is None else entries)
    records: list[EmbeddingRecord] = []
    skipped: list[str] = []
    size = model.config.input_size
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        images, kept = [], []
        for e in chunk:
            path = manifest.resolve(e)
            try:
                images.append(load_preprocessed(path, size))
            except OSError:
                skipped.append(path)
                continue
            kept.append((e, path))
        if not images:
            continue
        batch = torch.from_numpy(np.stack(images)[:, None])
        vectors = model.embed(batch).numpy()
        for (e, path), v in zip(kept, vectors):
            records.append(EmbeddingRecord(id=path, class_id=e.class_id,
                                           font_id=e.font_id, vector=v))
    return records, skipped


def evaluate(model: RetrievalModel, manifest: DatasetManifest, split: ClassSplit,
             batch_size: int = 32) -> MetricsReport:
    """Zero-shot protocol: queries are query-font images of held-out classes;
    the gallery is every gallery-font image of those classes."""
    test_classes = split.test_classes
    q_entries = [e for e in manifest.entries
                 if e.font_id == FONT_QUERY and e.class_id in test_classes]
    g_entries = [e for e in manifest.entries
                 if e.font_id == FONT_GALLERY and e.class_id in test_classes]
    if not q_entries or not g_entries:
        raise ManifestError(
            f"evaluation needs both query and gallery images of test classes "
            f"(got {len(q_entries)} queries, {len(g_entries)} gallery)")
    q_records, q_skipped = extract_embeddings(model, manifest, q_entries, batch_size)
    g_records, g_skipped = extract_embeddings(model, manifest, g_entries, batch_size)
    if q_skipped or g_skipped:
        raise ManifestError(f"unreadable images during evaluation: {q_skipped + g_skipped}")
    index = RetrievalIndex(g_records)
    rankings = rank_all(index, np.stack([r.vector for r in q_records]))
    return compute_metrics(rankings, np.array([r.class_id for r in q_records]),
                           index.class_ids)


# ---------------------------------------------------------------------------
# embedding dump format (little-endian throughout)
#
#   header: magic "GLYPHEMB" (8 bytes) | version u32 | dim u32 | count u32
#   record: id_len u16 | id utf-8 bytes | class_id i32 | font u8 (0=query,
#           1=gallery) | dim * f32 vector
# ---------------------------------------------------------------------------

def dump_bytes(records: list[EmbeddingRecord]) -> bytes:
    if not records:
        raise ContractViolation("refusing to dump zero records")
    dim = records[0].vector.shape[-1]
    out = [EMB_MAGIC, struct.pack("<III", EMB_VERSION, dim, len(records))]
    for r in records:
        if r.vector.shape != (dim,):
            raise ContractViolation("records disagree on dimension")
        ident = r.id.encode("utf-8")
        if len(ident) > 0xFFFF:
            raise ContractViolation(f"record id too long: {len(ident)} bytes")
        out.append(struct.pack("<H", len(ident)))
        out.append(ident)
        out.append(struct.pack("<i", r.class_id))
        out.append(struct.pack("<B", FONT_ROLES.index(r.font_id)))
        out.append(np.ascontiguousarray(r.vector, dtype="<f4").tobytes())
    return b"".join(out)


def write_embeddings(path: str, records: list[EmbeddingRecord]) -> None:
    with open(path, "wb") as f:
        f.write(dump_bytes(records))


def read_embeddings(path: str) -> list[EmbeddingRecord]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != EMB_MAGIC:
        raise ContractViolation(f"{path} is not an embedding dump (bad magic)")
    version, dim, count = struct.unpack_from("<III", blob, 8)
    if version != EMB_VERSION:
        raise ContractViolation(f"embedding dump version {version} unsupported")
    offset = 8 + 12
    records = []
    for _ in range(count):
        (id_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        ident = blob[offset:offset + id_len].decode("utf-8")
        offset += id_len
        (class_id,) = struct.unpack_from("<i", blob, offset)
        offset += 4
        (font_code,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        vector = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).copy()
        offset += 4 * dim
        records.append(EmbeddingRecord(id=ident, class_id=class_id,
                                       font_id=FONT_ROLES[font_code], vector=vector))
    if offset != len(blob):
        raise ContractViolation(f"{path} has {len(blob) - offset} trailing bytes")
    return records
