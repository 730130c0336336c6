"""HTTP retrieval service: accept a glyph image, return ranked gallery
candidates with class labels as decipherment hypotheses.

Endpoints (all JSON unless noted):
  GET  /health           -> {"status", "version", "index_hash", "embedding_dim"}
  GET  /gallery/stats    -> {"num_images", "num_classes", "per_class"}
  POST /query?k=K[&font=ROLE]  body = raw image bytes (e.g. PNG)
                         -> {"results": [{gallery_image_id, class_id,
                             class_glyph_label, similarity, thumbnail}], ...}
  GET  /thumbnail/{idx}  -> original gallery image bytes

Preprocessing is the same code path as embedding extraction, so service
rankings match offline evaluation exactly.
"""

from __future__ import annotations

import io
import logging
import uuid
from collections import Counter

import numpy as np
import torch
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError

from . import __version__
from .data import FONT_ROLES, preprocess
from .model import load_checkpoint
from .retrieval import RetrievalIndex, read_embeddings

log = logging.getLogger(__name__)


def default_label(class_id: int) -> str:
    return f"class_{class_id}" if class_id >= 0 else "unknown"


def create_app(checkpoint_path: str, gallery_path: str,
               labels: dict[int, str] | None = None) -> FastAPI:
    checkpoint = load_checkpoint(checkpoint_path)
    model = checkpoint.model
    model.eval()
    records = read_embeddings(gallery_path)
    index = RetrievalIndex(records)
    if index.dim != model.embedding_dim:
        raise ValueError(f"gallery dump dimension {index.dim} does not match "
                         f"checkpoint embedding dimension {model.embedding_dim}")
    labels = labels or {}
    app = FastAPI(title="crossfont glyph retrieval service")

    def label_for(class_id: int) -> str:
        return labels.get(class_id, default_label(class_id))

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__,
                "index_hash": index.content_hash, "embedding_dim": index.dim}

    @app.get("/gallery/stats")
    def gallery_stats():
        per_class = Counter(int(c) for c in index.class_ids)
        return {"num_images": len(index), "num_classes": len(per_class),
                "per_class": {str(k): v for k, v in sorted(per_class.items())}}

    @app.post("/query")
    async def run_query(request: Request, k: int = 10, font: str | None = None):
        body = await request.body()
        if not body:
            return JSONResponse(status_code=400, content={"error": "empty request body"})
        if font is not None and font not in FONT_ROLES:
            return JSONResponse(status_code=400,
                                content={"error": f"font must be one of {FONT_ROLES}"})
        try:
            with Image.open(io.BytesIO(body)) as im:
                arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        except (UnidentifiedImageError, OSError) as e:
            return JSONResponse(status_code=400,
                                content={"error": f"cannot decode image: {e}"})
        candidates = [i for i, r in enumerate(index.records)
                      if font is None or r.font_id == font]
        if not candidates:
            return JSONResponse(status_code=400,
                                content={"error": f"gallery has no {font!r} images"})
        if not 1 <= k <= len(candidates):
            return JSONResponse(
                status_code=400,
                content={"error": f"k must lie in [1, {len(candidates)}], got {k}"})
        try:
            image = preprocess(arr, model.config.input_size)
            with torch.no_grad():
                vector = model.embed(torch.from_numpy(image[None, None]))[0].numpy()
            scores = index.matrix[candidates] @ vector
            order = np.argsort(-scores, kind="stable")[:k]
        except Exception:
            error_id = uuid.uuid4().hex
            log.exception("query failed (error_id=%s)", error_id)
            return JSONResponse(status_code=500, content={"error_id": error_id})
        results = []
        for local in order:
            idx = candidates[int(local)]
            r = index.records[idx]
            results.append({
                "gallery_image_id": r.id,
                "class_id": int(r.class_id),
                "class_glyph_label": label_for(int(r.class_id)),
                "similarity": float(scores[int(local)]),
                "thumbnail": f"/thumbnail/{idx}",
            })
        return {"results": results, "k": k, "num_gallery": len(candidates)}

    @app.get("/thumbnail/{idx}")
    def thumbnail(idx: int):
        if not 0 <= idx < len(index):
            return JSONResponse(status_code=404, content={"error": "no such thumbnail"})
        path = index.records[idx].id
        try:
            with open(path, "rb") as f:
                data = f.read()
        except OSError:
            return JSONResponse(status_code=404,
                                content={"error": f"image file not found: {path}"})
        media = "image/png" if path.lower().endswith(".png") else "application/octet-stream"
        return Response(content=data, media_type=media)

    return app


def serve(checkpoint_path: str, gallery_path: str, host: str = "127.0.0.1",
          port: int = 8000, labels: dict[int, str] | None = None,
          threads: int | None = None) -> None:
    import uvicorn

    if threads is not None:
        torch.set_num_threads(threads)
    app = create_app(checkpoint_path, gallery_path, labels)
    uvicorn.run(app, host=host, port=port, log_level="info")
