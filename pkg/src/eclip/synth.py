"""Seeded synthetic product catalogs with paired text features and images.

Every catalog draws a latent code shared by both modalities, so an item's text
and image agree about which catalog it belongs to:

* text  = class prototype + text_map(code) * catalog_spread + text nuisance + N(0, sigma)
* image = class stripe/checker pattern + image_map(code) * image_spread + image nuisance
  + N(0, sigma), rendered on a 5x5 patch grid, upsampled to ``image_size`` and
  quantized to bytes.

The nuisance terms are drawn once per catalog and independently per modality
(seller wording, photo backdrop), so each modality carries information the
other lacks.

Duplicates within a catalog differ only by the sigma noise (none at sigma=0).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List

import numpy as np

from .preprocess import HASH_GRID, ImageBuffer, ProductRecord, image_features, write_manifest, write_ppm
from .training import PairDataset

BRANCHING = 4
_EPOCH = datetime(2022, 1, 1)


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 32
    n_catalogs_per_class: int = 8
    n_duplicates_per_catalog: int = 3
    text_dim: int = 64
    image_size: int = 10
    noise_sigma: float = 0.1
    category_depth: int = 2
    seed: int = 0
    latent_dim: int = 8
    catalog_spread: float = 0.2
    image_spread: float = 0.04
    text_nuisance: float = 0.8
    image_nuisance: float = 0.12
    max_prototype_cosine: float = 0.5

    def __post_init__(self):
        counts = (self.n_classes, self.n_catalogs_per_class, self.n_duplicates_per_catalog, self.text_dim, self.latent_dim)
        if min(counts) < 1:
            raise ValueError("all counts must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 1 <= self.category_depth <= 4:
            raise ValueError("category_depth must lie in [1, 4]")
        if self.image_size < HASH_GRID:
            raise ValueError(f"image_size must be >= {HASH_GRID}")


@dataclass
class SynthDataset:
    spec: SynthSpec
    records: List[ProductRecord]
    text: np.ndarray
    images: List[ImageBuffer]
    class_ids: np.ndarray
    class_prompts: Dict[str, np.ndarray] = field(default_factory=dict)

    def pair_dataset(self) -> PairDataset:
        return to_pair_dataset(self.records, self.text, {r.product_id: im for r, im in zip(self.records, self.images)}, self.spec.image_size)


def category_path(cls: int, depth: int) -> list[str]:
    path = []
    for level in range(depth):
        group = cls // BRANCHING ** (depth - 1 - level)
        path.append(f"c{group:02d}" if level == depth - 1 else f"L{level}g{group:02d}")
    return path


def _prototypes(rng, n, dim, max_cos):
    protos = []
    for _ in range(100 * n):
        v = rng.normal(size=dim)
        u = v / np.linalg.norm(v)
        if all(abs(u @ (p / np.linalg.norm(p))) < max_cos for p in protos):
            protos.append(v)
            if len(protos) == n:
                return np.array(protos)
    raise RuntimeError("could not draw well-separated prototypes; raise text_dim")


def _class_pattern(cls: int, rng) -> np.ndarray:
    """5x5x3 patch colors in [0, 1]: one of four stripe/checker layouts in two colors."""
    r, c = np.mgrid[0:HASH_GRID, 0:HASH_GRID]
    kind, phase = cls % 4, (cls // 4) % 2
    if kind == 0:
        mask = (r + phase) % 2
    elif kind == 1:
        mask = (c + phase) % 2
    elif kind == 2:
        mask = (r + c + phase) % 2
    else:
        mask = ((r - c + phase) % 3 == 0).astype(int)
    fg, bg = rng.uniform(0.15, 0.85, size=3), rng.uniform(0.15, 0.85, size=3)
    return np.where(mask[..., None] == 1, fg, bg)


def _upsample(patches: np.ndarray, size: int) -> np.ndarray:
    # same row/column partition as the patch hash
    starts = [r * size // HASH_GRID for r in range(HASH_GRID)]
    idx = np.searchsorted(starts, np.arange(size), side="right") - 1
    return patches[idx][:, idx]


def generate(spec: SynthSpec) -> SynthDataset:
    rng = np.random.default_rng(spec.seed)
    protos = _prototypes(rng, spec.n_classes, spec.text_dim, spec.max_prototype_cosine)
    patterns = [_class_pattern(c, rng) for c in range(spec.n_classes)]
    text_map = rng.normal(size=(spec.latent_dim, spec.text_dim)) / np.sqrt(spec.latent_dim)
    image_map = rng.normal(size=(spec.latent_dim, HASH_GRID * HASH_GRID * 3)) / np.sqrt(spec.latent_dim)

    records, texts, images, class_ids = [], [], [], []
    idx = 0
    for c in range(spec.n_classes):
        path = category_path(c, spec.category_depth)
        for k in range(spec.n_catalogs_per_class):
            code = rng.normal(size=spec.latent_dim)
            text_center = (
                protos[c]
                + spec.catalog_spread * (code @ text_map)
                + spec.text_nuisance * rng.normal(size=spec.text_dim)
            )
            patch_center = (
                patterns[c]
                + spec.image_spread * (code @ image_map).reshape(HASH_GRID, HASH_GRID, 3)
                + spec.image_nuisance * rng.normal(size=(HASH_GRID, HASH_GRID, 3))
            )
            pixel_center = _upsample(patch_center, spec.image_size)
            for dup in range(spec.n_duplicates_per_catalog):
                text = text_center + spec.noise_sigma * rng.normal(size=spec.text_dim)
                px = pixel_center + spec.noise_sigma * rng.normal(size=pixel_center.shape)
                px = np.clip(np.rint(px * 255.0), 0, 255).astype(np.uint8)
                pid = f"p{idx:06d}"
                records.append(
                    ProductRecord(
                        product_id=pid,
                        title=f"product c{c:02d} model {k:03d} listing {dup}",
                        catalog_id=f"cat{c:02d}_{k:03d}",
                        product_category=list(path),
                        image_path=f"images/{pid}.ppm",
                        brand_name=f"brand{c:02d}",
                        maker_name=f"maker{c:02d}",
                        mall_name=f"mall{dup}",
                        mall_category=path[0],
                        price=int(rng.integers(1000, 100000)),
                        registration_time=(_EPOCH + timedelta(seconds=idx)).isoformat(),
                        popularity=float(rng.random()),
                    )
                )
                texts.append(text)
                images.append(ImageBuffer(px))
                class_ids.append(c)
                idx += 1
    prompts = {">".join(category_path(c, spec.category_depth)): protos[c].copy() for c in range(spec.n_classes)}
    return SynthDataset(spec, records, np.array(texts), images, np.array(class_ids), prompts)


def to_pair_dataset(records, text: np.ndarray, images: dict, image_side: int) -> PairDataset:
    return PairDataset(
        [r.product_id for r in records],
        np.asarray(text),
        np.stack([image_features(images[r.product_id], image_side) for r in records]),
        [r.catalog_id for r in records],
        [tuple(r.product_category) for r in records],
    )


def split_by_catalog(data: PairDataset, per_class: int = 1, seed: int = 0) -> tuple[PairDataset, PairDataset]:
    """Hold out ``per_class`` whole catalogs from every leaf category.

    Returns ``(train, held_out)``; no catalog appears in both.
    """
    rng = np.random.default_rng(seed)
    by_class: dict = {}
    for cat, path in zip(data.catalog_ids, data.categories):
        by_class.setdefault(path, [])
        if cat not in by_class[path]:
            by_class[path].append(cat)
    held = set()
    for path in sorted(by_class):
        cats = sorted(by_class[path])
        if len(cats) > per_class:
            held.update(rng.choice(cats, size=per_class, replace=False).tolist())
    train_ids = [p for p, c in zip(data.product_ids, data.catalog_ids) if c not in held]
    test_ids = [p for p, c in zip(data.product_ids, data.catalog_ids) if c in held]
    return data.subset(train_ids), data.subset(test_ids)


def inject_duplicates(records, images: dict, fraction: float, rng: np.random.Generator):
    """Turn ``fraction`` of the records into exact duplicates of earlier ones.

    Half copy an earlier record's title, half copy its pixels. Returns
    ``(records, images, injected_ids)``; sources are never themselves injected.
    """
    records = [ProductRecord(**asdict(r)) for r in records]
    images = dict(images)
    n_inject = int(round(fraction * len(records)))
    if n_inject >= len(records):
        raise ValueError("fraction leaves no source records")
    # record 0 is never a target, so every target has an earlier source
    order = 1 + rng.permutation(len(records) - 1)
    targets = sorted(order[:n_inject].tolist())
    target_set = set(targets)
    sources = [i for i in range(len(records)) if i not in target_set]
    injected = []
    for j, t in enumerate(targets):
        earlier = [s for s in sources if s < t]
        src = earlier[int(rng.integers(len(earlier)))]
        rec = records[t]
        if j % 2 == 0:
            rec.title = records[src].title
        else:
            images[rec.product_id] = ImageBuffer(images[records[src].product_id].pixels.copy())
        injected.append(rec.product_id)
    return records, images, injected


def write_synth(out_dir, data: SynthDataset) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.jsonl", data.records)
    for r, im in zip(data.records, data.images):
        write_ppm(out / r.image_path, im)
    np.savez(out / "features.npz", product_ids=np.array([r.product_id for r in data.records]), text=data.text)
    labels = sorted(data.class_prompts)
    np.savez(out / "prompts.npz", labels=np.array(labels), text=np.stack([data.class_prompts[k] for k in labels]))
    (out / "synth_spec.json").write_text(json.dumps(asdict(data.spec), indent=2))


def load_text_features(path) -> dict:
    z = np.load(path)
    return {str(pid): row for pid, row in zip(z["product_ids"], z["text"])}


def load_prompts(path) -> dict:
    z = np.load(path)
    return {str(k): row for k, row in zip(z["labels"], z["text"])}
