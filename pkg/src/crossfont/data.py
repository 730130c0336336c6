"""Dataset manifests, class-disjoint splits, augmentation, and a synthetic
cross-font glyph generator.

Manifest format: UTF-8 text, one record per line, tab-separated
``path<TAB>class_id<TAB>font_id`` with font_id in {"query", "gallery"}.
Paths resolve relative to the manifest's directory.
"""

from __future__ import annotations

import hashlib
import math
import os
import random
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .config import AugmentConfig
from .errors import ConfigError, ManifestError

FONT_QUERY = "query"
FONT_GALLERY = "gallery"
FONT_ROLES = (FONT_QUERY, FONT_GALLERY)

BACKGROUND = 1.0  # glyphs are dark ink on a white field


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # as written in the manifest file
    class_id: int
    font_id: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    class_count: int
    checksum: str
    root: str  # directory paths resolve against

    def resolve(self, entry: ManifestEntry) -> str:
        if os.path.isabs(entry.path):
            return entry.path
        return os.path.normpath(os.path.join(self.root, entry.path))

    def class_ids(self) -> list[int]:
        return sorted({e.class_id for e in self.entries})

    def by_font(self, font_id: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.font_id == font_id]


@dataclass(frozen=True)
class ClassSplit:
    train_classes: frozenset[int]
    test_classes: frozenset[int]
    seed: int


def _entries_checksum(entries) -> str:
    h = hashlib.sha256()
    for e in entries:
        h.update(f"{e.path}\t{e.class_id}\t{e.font_id}\n".encode("utf-8"))
    return h.hexdigest()


def load_manifest(path: str, verify_files: bool = True) -> DatasetManifest:
    """Parse a manifest file, deduplicate rows, and compute the entry checksum."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    root = os.path.dirname(os.path.abspath(path))

    entries: list[ManifestEntry] = []
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        p, cid_text, font = fields
        try:
            cid = int(cid_text)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: class_id {cid_text!r} is not an integer") from None
        if cid < 0:
            raise ManifestError(f"{path}:{lineno}: class_id must be >= 0")
        if font not in FONT_ROLES:
            raise ManifestError(f"{path}:{lineno}: font_id {font!r} not in {FONT_ROLES}")
        key = (p, cid, font)
        if key in seen:
            continue
        seen.add(key)
        entries.append(ManifestEntry(p, cid, font))

    if not entries:
        raise ManifestError(f"empty manifest: {path}")

    manifest = DatasetManifest(
        entries=tuple(entries),
        class_count=len({e.class_id for e in entries}),
        checksum=_entries_checksum(entries),
        root=root,
    )
    if verify_files:
        missing = [manifest.resolve(e) for e in entries if not os.path.isfile(manifest.resolve(e))]
        if missing:
            shown = "\n  ".join(missing[:10])
            raise ManifestError(
                f"{len(missing)} manifest image(s) missing; first {min(10, len(missing))}:\n  {shown}"
            )
    return manifest


def write_manifest(path: str, entries) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(f"{e.path}\t{e.class_id}\t{e.font_id}\n")


def split_by_class(manifest: DatasetManifest, holdout_fraction: float = 0.30,
                   seed: int = 0) -> ClassSplit:
    """Split classes into disjoint train/test sets, deterministically per seed.

    The test count is round-half-up of fraction*classes, clamped to
    [1, classes-1].
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError("holdout_fraction must lie in (0, 1)")
    classes = manifest.class_ids()
    n = len(classes)
    if n < 2:
        raise ManifestError("need at least 2 classes to split")
    n_test = int(math.floor(holdout_fraction * n + 0.5))
    n_test = max(1, min(n - 1, n_test))
    shuffled = list(classes)
    random.Random(seed).shuffle(shuffled)
    test = frozenset(shuffled[:n_test])
    train = frozenset(shuffled[n_test:])
    return ClassSplit(train_classes=train, test_classes=test, seed=seed)


# ---------------------------------------------------------------------------
# image loading / preprocessing
# ---------------------------------------------------------------------------

def load_image(path: str) -> np.ndarray:
    """Read an image file as float32 grayscale in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr / 255.0


def preprocess(image: np.ndarray, input_size: int) -> np.ndarray:
    """Pad to square (white field) and bilinearly resize to input_size."""
    import torch
    import torch.nn.functional as F

    if image.ndim != 2:
        raise ConfigError("expected a single-channel HxW image")
    h, w = image.shape
    if h != w:
        side = max(h, w)
        canvas = np.full((side, side), BACKGROUND, dtype=np.float32)
        top = (side - h) // 2
        left = (side - w) // 2
        canvas[top:top + h, left:left + w] = image
        image = canvas
    if image.shape[0] != input_size:
        t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None]
        t = F.interpolate(t, size=(input_size, input_size), mode="bilinear", align_corners=False)
        image = t[0, 0].numpy()
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def load_preprocessed(path: str, input_size: int) -> np.ndarray:
    return preprocess(load_image(path), input_size)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random pad + random crop back to size (net translation) + random h-flip.

    Output shape and the [0, 1] range are preserved; identity when disabled.
    """
    if not cfg.enabled:
        return image.copy()
    side = image.shape[0]
    max_pad = int(round(side * cfg.pad_fraction))
    if max_pad > 0:
        t, b, l, r = (int(rng.integers(0, max_pad + 1)) for _ in range(4))
        padded = np.pad(image, ((t, b), (l, r)), mode="constant", constant_values=BACKGROUND)
        ph, pw = padded.shape
        top = int(rng.integers(0, ph - side + 1))
        left = int(rng.integers(0, pw - side + 1))
        image = padded[top:top + side, left:left + side]
    else:
        image = image.copy()
    if rng.random() < cfg.flip_prob:
        image = hflip(image)
    return np.ascontiguousarray(image, dtype=np.float32)


# ---------------------------------------------------------------------------
# synthetic cross-font generator
# ---------------------------------------------------------------------------
#
# Each class is a deterministic composition of polyline strokes on a lattice.
# The "query" font renders thin strokes with endpoint jitter and, for a small
# deterministic subset of classes, a horizontal mirror; the "gallery" font
# renders thick strokes with an affine skew and one stroke group offset.

_GRID = np.linspace(0.18, 0.82, 4)


def _base_strokes(seed: int, class_id: int) -> list[np.ndarray]:
    rng = np.random.default_rng([seed, class_id])
    n_strokes = int(rng.integers(4, 9))
    strokes = []
    for _ in range(n_strokes):
        n_pts = 3 if rng.random() < 0.3 else 2
        idx = rng.integers(0, len(_GRID), size=(n_pts, 2))
        pts = np.stack([_GRID[idx[:, 0]], _GRID[idx[:, 1]]], axis=1)
        if n_pts == 2 and np.allclose(pts[0], pts[1]):
            pts[1] = pts[1] + 0.12  # avoid zero-length strokes
        strokes.append(pts.astype(np.float64))
    return strokes


def _render(strokes, size: int, width: float) -> np.ndarray:
    """Rasterize strokes as dark ink on white; width in unit coordinates."""
    ys, xs = np.mgrid[0:size, 0:size]
    px = (xs + 0.5) / size
    py = (ys + 0.5) / size
    dist = np.full((size, size), np.inf)
    for pts in strokes:
        for a, b in zip(pts[:-1], pts[1:]):
            d = b - a
            denom = float(d @ d)
            if denom < 1e-12:
                t = np.zeros_like(px)
            else:
                t = ((px - a[0]) * d[0] + (py - a[1]) * d[1]) / denom
                t = np.clip(t, 0.0, 1.0)
            cx = a[0] + t * d[0]
            cy = a[1] + t * d[1]
            seg = np.hypot(px - cx, py - cy)
            dist = np.minimum(dist, seg)
    aa = 1.0 / size  # one-pixel anti-aliasing band
    img = np.clip((dist - width / 2) / aa + 0.5, 0.0, 1.0)
    return img.astype(np.float32)


def _query_variant(strokes, rng: np.random.Generator, mirrored: bool) -> list[np.ndarray]:
    out = []
    for pts in strokes:
        p = pts + rng.normal(0.0, 0.012, size=pts.shape)
        if mirrored:
            p = p.copy()
            p[:, 0] = 1.0 - p[:, 0]
        out.append(p)
    return out


def _gallery_variant(strokes, rng: np.random.Generator, shear: float,
                     offset_idx: int, offset: np.ndarray) -> list[np.ndarray]:
    out = []
    for i, pts in enumerate(strokes):
        p = pts + rng.normal(0.0, 0.008, size=pts.shape)
        p = p.copy()
        p[:, 0] = p[:, 0] + shear * (p[:, 1] - 0.5)
        if i == offset_idx:
            p = p + offset
        out.append(p)
    return out


QUERY_WIDTH = 0.030
GALLERY_WIDTH = 0.052
MIRROR_FRACTION = 0.15


def render_glyph(seed: int, class_id: int, font_id: str, image_idx: int,
                 size: int = 64) -> np.ndarray:
    """Render one deterministic glyph image for (seed, class, font, index)."""
    strokes = _base_strokes(seed, class_id)
    class_rng = np.random.default_rng([seed, class_id, 7])
    mirrored = class_rng.random() < MIRROR_FRACTION
    shear = float(class_rng.uniform(-0.12, 0.12))
    offset_idx = int(class_rng.integers(0, len(strokes)))
    offset = class_rng.uniform(-0.035, 0.035, size=2)

    font_code = FONT_ROLES.index(font_id)
    rng = np.random.default_rng([seed, class_id, font_code, image_idx])
    if font_id == FONT_QUERY:
        variant = _query_variant(strokes, rng, mirrored)
        width = QUERY_WIDTH * float(rng.uniform(0.85, 1.15))
    else:
        variant = _gallery_variant(strokes, rng, shear, offset_idx, offset)
        width = GALLERY_WIDTH * float(rng.uniform(0.9, 1.1))
    return _render(variant, size, width)


def synth_generate(num_classes: int, images_per_class_per_font: int, seed: int,
                   out_dir: str, image_size: int = 64) -> DatasetManifest:
    """Write a synthetic two-font dataset plus its manifest; fully seeded."""
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if images_per_class_per_font < 1:
        raise ConfigError("images_per_class_per_font must be >= 1")
    img_dir = os.path.join(out_dir, "images")
    try:
        os.makedirs(img_dir, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {img_dir}: {e}") from e

    entries = []
    for cid in range(num_classes):
        for font in FONT_ROLES:
            for i in range(images_per_class_per_font):
                img = render_glyph(seed, cid, font, i, size=image_size)
                name = f"c{cid:04d}_{font}_{i:02d}.png"
                data = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
                Image.fromarray(data, mode="L").save(os.path.join(img_dir, name))
                entries.append(ManifestEntry(os.path.join("images", name), cid, font))

    manifest_path = os.path.join(out_dir, "manifest.tsv")
    write_manifest(manifest_path, entries)
    return load_manifest(manifest_path)


def content_digest(manifest: DatasetManifest) -> str:
    """SHA-256 over entry rows plus the referenced image bytes.

    The manifest checksum tracks the entry list only; this digest also covers
    pixel content, so regenerating with a different seed changes it.
    """
    h = hashlib.sha256()
    for e in manifest.entries:
        h.update(f"{e.path}\t{e.class_id}\t{e.font_id}\n".encode("utf-8"))
        with open(manifest.resolve(e), "rb") as f:
            h.update(f.read())
    return h.hexdigest()
