"""Catalog cleaning: validity filtering, title/pixel/embedding dedup, manifest I/O.

Images are binary PPM (P6) files. Manifests are JSON lines, one product per line.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from .errors import DegenerateError

logger = logging.getLogger(__name__)

HASH_GRID = 5
REJECT_REASONS = ("no-image", "corrupt", "small-image", "short-title", "flagged")
DEDUP_REASONS = ("dup-title", "dup-hash", "dup-embedding", "dup-catalog")


@dataclass
class ProductRecord:
    product_id: str
    title: str
    catalog_id: str
    product_category: List[str] = field(default_factory=list)
    image_path: Optional[str] = None
    brand_name: Optional[str] = None
    maker_name: Optional[str] = None
    mall_name: Optional[str] = None
    mall_category: Optional[str] = None
    price: Optional[int] = None
    registration_time: str = ""
    popularity: float = 0.0
    flagged: bool = False

    def __post_init__(self):
        if len(self.product_category) > 4:
            raise ValueError(f"{self.product_id}: category path deeper than 4 levels")

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ProductRecord":
        known = cls.__dataclass_fields__
        extra = set(d) - set(known)
        if extra:
            raise ValueError(f"unknown manifest fields: {sorted(extra)}")
        d = dict(d)
        d["product_id"] = str(d["product_id"])
        d["catalog_id"] = str(d["catalog_id"])
        return cls(**d)


@dataclass
class ImageBuffer:
    pixels: np.ndarray  # H x W x 3, uint8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        self.pixels = self.pixels.astype(np.uint8, copy=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


class CorruptImageError(ValueError):
    pass


def write_ppm(path, image: ImageBuffer) -> None:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(image.pixels).tobytes())


def read_ppm(path) -> ImageBuffer:
    """Parse a binary P6 pixmap with maxval 255; raises ``CorruptImageError`` on bad data."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    try:
        while len(fields) < 4:
            while data[pos : pos + 1].isspace():
                pos += 1
            if data[pos : pos + 1] == b"#":
                while data[pos : pos + 1] not in (b"\n", b""):
                    pos += 1
                continue
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            fields.append(data[start:pos])
        pos += 1  # single whitespace byte before the raster
        if fields[0] != b"P6":
            raise CorruptImageError(f"{path}: not a P6 pixmap")
        w, h, maxval = (int(f) for f in fields[1:])
    except (IndexError, ValueError) as exc:
        raise CorruptImageError(f"{path}: bad header") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise CorruptImageError(f"{path}: unsupported geometry or maxval")
    raster = data[pos : pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise CorruptImageError(f"{path}: truncated raster")
    return ImageBuffer(np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3))


def read_manifest(path) -> list[ProductRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    records.append(ProductRecord.from_dict(json.loads(line)))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_manifest(path, records: Iterable[ProductRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def tokenize_title(title: str) -> list[str]:
    """Lowercased alphanumeric runs; every other codepoint acts as a separator."""
    cleaned = "".join(ch if ch.isalnum() else " " for ch in title)
    return cleaned.lower().split()


def validate(
    record: ProductRecord,
    image: Optional[ImageBuffer],
    min_side: int = 64,
    corrupt: bool = False,
) -> Optional[str]:
    """Return ``None`` to keep the record, otherwise the rejection reason."""
    if corrupt:
        return "corrupt"
    if image is None:
        return "no-image"
    if min(image.width, image.height) < min_side:
        return "small-image"
    if len(tokenize_title(record.title)) < 2:
        return "short-title"
    if record.flagged:
        return "flagged"
    return None


def _grid_bounds(size: int) -> list[tuple[int, int]]:
    return [(r * size // HASH_GRID, (r + 1) * size // HASH_GRID) for r in range(HASH_GRID)]


def patch_gray_means(image: ImageBuffer) -> np.ndarray:
    """5x5 grid of mean ``(R+G+B)/3`` values."""
    if image.width < HASH_GRID or image.height < HASH_GRID:
        raise DegenerateError(f"image {image.width}x{image.height} smaller than {HASH_GRID}x{HASH_GRID}")
    rgb_sum = image.pixels.astype(np.int64).sum(axis=2)
    out = np.empty((HASH_GRID, HASH_GRID))
    for r, (r0, r1) in enumerate(_grid_bounds(image.height)):
        for c, (c0, c1) in enumerate(_grid_bounds(image.width)):
            out[r, c] = rgb_sum[r0:r1, c0:c1].sum() / (3.0 * (r1 - r0) * (c1 - c0))
    return out


def patch_hash(image: ImageBuffer) -> str:
    """29-digit key: 25 patch-brightness digits plus two 2-digit size buckets.

    Each patch digit is ``min(9, floor(gray_mean / 25.6))``, evaluated in integer
    arithmetic; the size buckets are ``min(99, width // 100)`` then
    ``min(99, height // 100)``.
    """
    if image.width < HASH_GRID or image.height < HASH_GRID:
        raise DegenerateError(f"image {image.width}x{image.height} smaller than {HASH_GRID}x{HASH_GRID}")
    rgb_sum = image.pixels.astype(np.int64).sum(axis=2)
    digits = []
    for r0, r1 in _grid_bounds(image.height):
        for c0, c1 in _grid_bounds(image.width):
            total = int(rgb_sum[r0:r1, c0:c1].sum())
            count = (r1 - r0) * (c1 - c0)
            # floor(total / (3 count) / 25.6) == floor(10 total / (768 count))
            digits.append(str(min(9, (10 * total) // (768 * count))))
    digits.append(f"{min(99, image.width // 100):02d}")
    digits.append(f"{min(99, image.height // 100):02d}")
    return "".join(digits)


def default_embedder(image: ImageBuffer) -> np.ndarray:
    return patch_gray_means(image).reshape(-1)


@dataclass
class DedupReport:
    input_count: int = 0
    kept: int = 0
    removed: dict = field(default_factory=lambda: {r: 0 for r in REJECT_REASONS + DEDUP_REASONS})
    removed_ids: dict = field(default_factory=dict)

    @property
    def total_removed(self) -> int:
        return sum(self.removed.values())

    def add(self, reason: str, pid: str) -> None:
        self.removed[reason] += 1
        self.removed_ids[pid] = reason

    def to_dict(self) -> dict:
        return {
            "input_count": self.input_count,
            "kept": self.kept,
            "removed": dict(self.removed),
            "total_removed": self.total_removed,
            "removed_ids": dict(self.removed_ids),
        }


def _precedence(r: ProductRecord):
    return (r.registration_time, r.product_id)


def dedup(
    manifest: Sequence[ProductRecord],
    images: dict,
    embedder: Callable[[ImageBuffer], np.ndarray] = default_embedder,
    catalog_dedup: bool = False,
    report: Optional[DedupReport] = None,
) -> tuple[list[ProductRecord], DedupReport]:
    """Drop duplicate titles, duplicate patch hashes, then duplicate embeddings.

    Within each pass the record with the earliest ``registration_time`` (then
    lowest ``product_id``) survives. Titles are compared as ordered token
    sequences; embeddings after rounding to 3 decimals. ``catalog_dedup`` adds
    a final pass keeping one record per ``catalog_id``. Kept records retain
    their input order.
    """
    if report is None:
        report = DedupReport(input_count=len(manifest))
    order = sorted(manifest, key=_precedence)
    alive = {r.product_id for r in manifest}

    def run_pass(reason, key_fn):
        seen = set()
        for r in order:
            if r.product_id not in alive:
                continue
            key = key_fn(r)
            if key in seen:
                alive.discard(r.product_id)
                report.add(reason, r.product_id)
            else:
                seen.add(key)

    run_pass("dup-title", lambda r: tuple(tokenize_title(r.title)))
    run_pass("dup-hash", lambda r: patch_hash(images[r.product_id]))
    run_pass(
        "dup-embedding",
        lambda r: tuple(np.round(np.asarray(embedder(images[r.product_id]), dtype=float), 3).tolist()),
    )
    if catalog_dedup:
        run_pass("dup-catalog", lambda r: r.catalog_id)
    kept = [r for r in manifest if r.product_id in alive]
    report.kept = len(kept)
    return kept, report


def load_images(records: Sequence[ProductRecord], root) -> tuple[dict, dict]:
    """Load each record's image; returns ``(images, failures)`` with failures mapping id -> reason."""
    images, failures = {}, {}
    for r in records:
        if not r.image_path:
            failures[r.product_id] = "no-image"
            continue
        path = Path(root) / r.image_path
        if not path.exists():
            failures[r.product_id] = "no-image"
            continue
        try:
            images[r.product_id] = read_ppm(path)
        except CorruptImageError:
            failures[r.product_id] = "corrupt"
    return images, failures


def clean_manifest(
    records: Sequence[ProductRecord],
    images: dict,
    failures: Optional[dict] = None,
    min_side: int = 64,
    embedder: Callable[[ImageBuffer], np.ndarray] = default_embedder,
    catalog_dedup: bool = False,
) -> tuple[list[ProductRecord], DedupReport]:
    """Validation followed by dedup, with a single report covering both."""
    failures = failures or {}
    report = DedupReport(input_count=len(records))
    valid = []
    for r in records:
        reason = validate(
            r, images.get(r.product_id), min_side, corrupt=failures.get(r.product_id) == "corrupt"
        )
        if reason is None:
            valid.append(r)
        else:
            report.add(reason, r.product_id)
    kept, report = dedup(valid, images, embedder, catalog_dedup, report)
    logger.info("kept %d of %d records", report.kept, report.input_count)
    return kept, report


def title_features(title: str, dim: int = 64) -> np.ndarray:
    """Bag-of-token-hash vector: each token adds +-1 at a stable hashed slot."""
    v = np.zeros(dim)
    for tok in tokenize_title(title):
        h = int.from_bytes(hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest(), "little")
        v[h % dim] += 1.0 if (h >> 32) & 1 else -1.0
    return v


def image_features(image: ImageBuffer, side: int) -> np.ndarray:
    """Area-average to ``side x side`` RGB, scaled to [0, 1], flattened."""
    px = image.pixels.astype(np.float64) / 255.0
    if image.height == side and image.width == side:
        return px.reshape(-1)
    rows = [(r * image.height // side, max((r + 1) * image.height // side, r * image.height // side + 1)) for r in range(side)]
    cols = [(c * image.width // side, max((c + 1) * image.width // side, c * image.width // side + 1)) for c in range(side)]
    out = np.empty((side, side, 3))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[i, j] = px[r0:r1, c0:c1].mean(axis=(0, 1))
    return out.reshape(-1)
