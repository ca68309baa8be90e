"""Dataset loading, gene selection, patch extraction and synthetic slides.

On-disk layout (shared by real and synthetic data)::

    root/slides/<slide_id>.png   RGB image
    root/counts/<slide_id>.tsv   header: spot_id, gene names; rows: spot_id, counts
    root/spots/<slide_id>.tsv    spot_id, x_pixel, y_pixel
    root/meta.json               {"patients": {slide_id: patient_id}, "test_slides": [...]}

Spot centers are ``(x, y)`` with ``x`` the column and ``y`` the row.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image

from .config import IngestConfig, SynthConfig
from .errors import (AlignmentError, BoundaryError, ConfigError,
                     DatasetLayoutError, DomainError, ParseError)

log = logging.getLogger(__name__)

TRAIN, TEST = "train", "test"


@dataclass(frozen=True)
class SpotRecord:
    spot_id: str
    center: tuple
    expression: np.ndarray


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    patient_id: str
    image: np.ndarray
    spots: tuple
    split: str = TRAIN

    @property
    def shape(self):
        return self.image.shape[:2]


@dataclass(frozen=True)
class DatasetBundle:
    slides: tuple
    gene_names: tuple
    preprocessing_log: dict = field(default_factory=dict)

    @property
    def n_genes(self):
        return len(self.gene_names)

    @property
    def n_spots(self):
        return sum(len(s.spots) for s in self.slides)

    def slide_ids(self, split=None):
        return [s.slide_id for s in self.slides if split is None or s.split == split]

    def slide(self, slide_id):
        for s in self.slides:
            if s.slide_id == slide_id:
                return s
        raise KeyError(slide_id)


@dataclass(frozen=True)
class PatchSample:
    slide_id: str
    spot_id: str
    center: tuple
    patch: np.ndarray
    target: np.ndarray


@dataclass
class SpotTable:
    """Flat arrays over every spot of a split, in slide then file order."""

    patches: np.ndarray  # N x p x p x 3 uint8
    targets: np.ndarray  # N x g float32
    centers: np.ndarray  # N x 2 (x, y)
    slide_index: np.ndarray  # N ints into slide_ids
    spot_ids: list
    slide_ids: list
    slide_shapes: list  # (h, w) per slide

    def __len__(self):
        return len(self.spot_ids)

    def __getitem__(self, i):
        return PatchSample(self.slide_ids[self.slide_index[i]], self.spot_ids[i],
                           tuple(int(c) for c in self.centers[i]),
                           self.patches[i], self.targets[i])


def normalize_expression(counts):
    """Element-wise natural ``log(1 + x)``."""
    counts = np.asarray(counts, dtype=np.float64)
    if not np.all(np.isfinite(counts)):
        raise DomainError("counts contain non-finite values")
    if np.any(counts < 0):
        raise DomainError("counts must be non-negative")
    return np.log1p(counts)


def select_genes(counts, gene_names, n_hvg, min_spots):
    """Rank genes by variance of log1p counts, keep ``n_hvg``, then drop rare genes.

    Returns ``(kept_indices, record)``; indices are in descending-variance order
    with ties broken by ascending original index.
    """
    counts = np.asarray(counts, dtype=np.float64)
    n_genes = counts.shape[1]
    if len(gene_names) != n_genes:
        raise ConfigError("gene_names length does not match counts columns")
    if n_hvg < 1 or n_hvg > n_genes:
        raise ConfigError(f"n_hvg={n_hvg} outside [1, {n_genes}]")
    if min_spots < 0:
        raise ConfigError("min_spots must be >= 0")
    var = normalize_expression(counts).var(axis=0)
    order = np.lexsort((np.arange(n_genes), -var))
    hvg = order[:n_hvg]
    expressed = (counts[:, hvg] > 0).sum(axis=0)
    kept = hvg[expressed >= min_spots]
    record = {
        "n_genes_input": int(n_genes),
        "n_genes_after_hvg": int(len(hvg)),
        "n_genes_after_min_spots": int(len(kept)),
        "n_hvg": int(n_hvg),
        "min_spots": int(min_spots),
    }
    return kept, record


def extract_patch(slide, center, p):
    """Exact ``p x p`` window ``[x - p/2, x + p/2) x [y - p/2, y + p/2)``."""
    if p <= 0 or p % 2:
        raise ConfigError(f"patch size must be a positive even integer, got {p}")
    image = slide.image if isinstance(slide, SlideRecord) else np.asarray(slide)
    x, y = int(center[0]), int(center[1])
    h, w = image.shape[:2]
    r0, c0 = y - p // 2, x - p // 2
    if r0 < 0 or c0 < 0 or r0 + p > h or c0 + p > w:
        raise BoundaryError(f"window of size {p} at center {(x, y)} exceeds image {h}x{w}")
    return image[r0:r0 + p, c0:c0 + p].copy()


def _inside(center, p, h, w):
    x, y = center
    return y - p // 2 >= 0 and x - p // 2 >= 0 and y + p // 2 <= h and x + p // 2 <= w


def split_by_slide(bundle, test_slide_ids):
    test_slide_ids = set(test_slide_ids)
    unknown = test_slide_ids - set(bundle.slide_ids())
    if unknown:
        raise ConfigError(f"unknown test slide ids: {sorted(unknown)}")
    slides = tuple(dataclasses.replace(s, split=TEST if s.slide_id in test_slide_ids else TRAIN)
                   for s in bundle.slides)
    return dataclasses.replace(bundle, slides=slides)


def _preprocess(raw, n_hvg, min_spots):
    """raw: list of (slide meta dict, spot ids, centers, counts matrix); shared gene axis."""
    names = raw["gene_names"]
    all_counts = np.concatenate([r["counts"] for r in raw["slides"]], axis=0) \
        if raw["slides"] else np.zeros((0, len(names)))
    kept, record = select_genes(all_counts, names, n_hvg, min_spots)
    slides = []
    for r in raw["slides"]:
        expr = normalize_expression(r["counts"][:, kept])
        spots = tuple(SpotRecord(sid, (int(c[0]), int(c[1])), expr[j])
                      for j, (sid, c) in enumerate(zip(r["spot_ids"], r["centers"])))
        slides.append(SlideRecord(r["slide_id"], r["patient_id"], r["image"], spots, r["split"]))
    record["n_spots"] = int(all_counts.shape[0])
    return tuple(slides), tuple(names[i] for i in kept), kept, record


def _read_table(path, what):
    if not path.is_file():
        raise DatasetLayoutError(f"missing {what} file: {path}")
    try:
        return pd.read_csv(path, sep="\t", index_col=0, dtype={0: str},
                           float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _load_slide_raw(root, slide_id, patient_id, split, p):
    img_path = root / "slides" / f"{slide_id}.png"
    if not img_path.is_file():
        raise DatasetLayoutError(f"missing image file: {img_path}")
    counts = _read_table(root / "counts" / f"{slide_id}.tsv", "counts")
    coords = _read_table(root / "spots" / f"{slide_id}.tsv", "spots")
    counts.index = counts.index.astype(str)
    coords.index = coords.index.astype(str)
    for col in ("x_pixel", "y_pixel"):
        if col not in coords.columns:
            raise ParseError(f"spots file for {slide_id} lacks column {col!r}")
    try:
        values = counts.apply(pd.to_numeric, errors="raise").to_numpy(np.float64)
        xy = coords[["x_pixel", "y_pixel"]].apply(pd.to_numeric, errors="raise")
    except (ValueError, TypeError) as exc:
        raise ParseError(f"non-numeric entry for slide {slide_id}: {exc}") from exc
    if np.any(xy.to_numpy() % 1 != 0):
        raise ParseError(f"non-integer pixel coordinate in slide {slide_id}")
    missing_counts = [s for s in coords.index if s not in set(counts.index)]
    missing_coords = [s for s in counts.index if s not in set(coords.index)]
    if missing_counts:
        raise AlignmentError(f"slide {slide_id}: spot {missing_counts[0]!r} has coordinates "
                             f"but no counts ({len(missing_counts)} total)")
    if missing_coords:
        raise AlignmentError(f"slide {slide_id}: spot {missing_coords[0]!r} has counts "
                             f"but no coordinates ({len(missing_coords)} total)")
    if counts.index.has_duplicates:
        raise AlignmentError(f"slide {slide_id}: duplicate spot ids in counts")
    with Image.open(img_path) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.uint8)
    h, w = image.shape[:2]
    order = [counts.index.get_loc(s) for s in coords.index]
    values = values[order]
    centers = xy.to_numpy(np.int64)
    keep = np.array([_inside(c, p, h, w) for c in centers], dtype=bool)
    skipped = int((~keep).sum())
    if skipped:
        log.info("slide %s: skipped %d boundary spots", slide_id, skipped)
    return {
        "slide_id": slide_id, "patient_id": patient_id, "split": split, "image": image,
        "spot_ids": [s for s, k in zip(coords.index, keep) if k],
        "centers": centers[keep], "counts": values[keep],
        "gene_names": [str(g) for g in counts.columns], "skipped": skipped,
    }


def load_dataset(root, cfg=None):
    """Load and preprocess a dataset directory into a :class:`DatasetBundle`."""
    cfg = cfg or IngestConfig()
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise DatasetLayoutError(f"missing meta file: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{meta_path}: {exc}") from exc
    patients = meta.get("patients", {})
    test_slides = set(meta.get("test_slides", []))
    slide_dir = root / "slides"
    if not slide_dir.is_dir():
        raise DatasetLayoutError(f"missing directory: {slide_dir}")
    slide_ids = sorted(p.stem for p in slide_dir.glob("*.png"))
    if not slide_ids:
        raise DatasetLayoutError(f"no slide images under {slide_dir}")
    unknown = test_slides - set(slide_ids)
    if unknown:
        raise ConfigError(f"meta.json names unknown test slides: {sorted(unknown)}")
    raws = []
    for sid in slide_ids:
        if sid not in patients:
            raise DatasetLayoutError(f"meta.json has no patient for slide {sid}")
        raws.append(_load_slide_raw(root, sid, str(patients[sid]),
                                    TEST if sid in test_slides else TRAIN, cfg.patch_size))

    # union of gene panels, first-appearance order; absent genes count as zero
    gene_index = {}
    for r in raws:
        for g in r["gene_names"]:
            gene_index.setdefault(g, len(gene_index))
    names = list(gene_index)
    for r in raws:
        if r["gene_names"] != names:
            full = np.zeros((len(r["counts"]), len(names)))
            full[:, [gene_index[g] for g in r["gene_names"]]] = r["counts"]
            r["counts"] = full
    slides, kept_names, _, record = _preprocess({"gene_names": names, "slides": raws},
                                                cfg.n_hvg, cfg.min_spots)
    record["n_slides"] = len(slides)
    record["n_patients"] = len({s.patient_id for s in slides})
    record["n_boundary_skipped"] = int(sum(r["skipped"] for r in raws))
    record["patch_size"] = int(cfg.patch_size)
    if "synthetic" in meta:
        record["synthetic"] = meta["synthetic"]
    return DatasetBundle(slides, kept_names, record)


def write_dataset(bundle, root):
    """Write ``bundle`` in the dataset layout; counts are ``expm1(expression)``."""
    root = Path(root)
    for sub in ("slides", "counts", "spots"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in bundle.slides:
        Image.fromarray(s.image).save(root / "slides" / f"{s.slide_id}.png")
        with open(root / "counts" / f"{s.slide_id}.tsv", "w") as fh:
            fh.write("\t".join(["spot_id", *bundle.gene_names]) + "\n")
            for spot in s.spots:
                vals = np.expm1(spot.expression)
                fh.write("\t".join([spot.spot_id, *(repr(float(v)) for v in vals)]) + "\n")
        with open(root / "spots" / f"{s.slide_id}.tsv", "w") as fh:
            fh.write("spot_id\tx_pixel\ty_pixel\n")
            for spot in s.spots:
                fh.write(f"{spot.spot_id}\t{spot.center[0]}\t{spot.center[1]}\n")
    meta = {
        "patients": {s.slide_id: s.patient_id for s in bundle.slides},
        "test_slides": [s.slide_id for s in bundle.slides if s.split == TEST],
    }
    if "synthetic" in bundle.preprocessing_log:
        meta["synthetic"] = bundle.preprocessing_log["synthetic"]
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _stable_log1p(y):
    # fixed point of log1p(expm1(.)) so that written counts reload bit-identically
    for _ in range(8):
        nxt = np.log1p(np.expm1(y))
        if np.array_equal(nxt, y):
            break
        y = nxt
    return y


def generate_synthetic(cfg=None, seed=0):
    """Deterministic synthetic slides with a known expression-generating map.

    Each spot window is a tinted, noisy tile of one tissue type; expression is
    ``bias + weight @ (mean_rgb - 0.5)`` plus Gaussian noise of std ``cfg.noise``,
    where ``mean_rgb`` is the mean of the spot's ``p x p`` window scaled to [0, 1].
    """
    cfg = cfg or SynthConfig()
    for name in ("n_slides", "spots_per_slide", "n_genes", "patch_size", "n_patients",
                 "n_tissue_types"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive")
    if cfg.noise < 0 or cfg.image_size < 0 or cfg.n_test_slides < 0:
        raise ConfigError("noise, image_size and n_test_slides must be non-negative")
    if cfg.n_test_slides > cfg.n_slides:
        raise ConfigError("n_test_slides exceeds n_slides")
    if cfg.layout not in ("regions", "blobs"):
        raise ConfigError(f"unknown layout {cfg.layout!r}")
    p = cfg.patch_size
    if p % 4:
        raise ConfigError("patch_size must be divisible by 4")
    nx = math.ceil(math.sqrt(cfg.spots_per_slide))
    ny = math.ceil(cfg.spots_per_slide / nx)
    size = cfg.image_size or (max(nx, ny) + 1) * p
    if size < max(nx, ny) * p:
        raise ConfigError(f"image_size {size} too small for a {nx}x{ny} grid of {p}px spots")

    rng = np.random.default_rng(seed)
    n_types = 2 if cfg.layout == "blobs" else cfg.n_tissue_types
    if cfg.layout == "blobs":
        palette = np.array([[0.85, 0.35, 0.55], [0.35, 0.30, 0.80]])
    else:
        palette = rng.uniform(0.2, 0.85, size=(n_types, 3))
    weight = rng.uniform(-1.5, 1.5, size=(cfg.n_genes, 3))
    bias = rng.uniform(2.5, 3.5, size=cfg.n_genes)

    off_x = (size - nx * p) // 2
    off_y = (size - ny * p) // 2
    raws = []
    for i in range(cfg.n_slides):
        slide_id = f"synth_{i:02d}"
        img = 0.93 + rng.normal(0.0, 0.02, size=(size, size, 3))
        grid = [(k % nx, k // nx) for k in range(cfg.spots_per_slide)]
        if cfg.layout == "blobs":
            types = [0 if gx < nx / 2 else 1 for gx, _ in grid]
        else:
            seeds = rng.uniform(0, max(nx, ny), size=(n_types, 2))
            types = [int(np.argmin(((seeds - (gx + 0.5, gy + 0.5)) ** 2).sum(1)))
                     for gx, gy in grid]
        centers = []
        for (gx, gy), t in zip(grid, types):
            r0, c0 = off_y + gy * p, off_x + gx * p
            tint = palette[t] + rng.uniform(-0.1, 0.1, size=3)
            tile = tint + rng.normal(0.0, 0.05, size=(p, p, 3))
            nuclei = rng.random((p, p)) < 0.05
            tile[nuclei] *= 0.6
            img[r0:r0 + p, c0:c0 + p] = tile
            centers.append((c0 + p // 2, r0 + p // 2))
        image = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        mean_rgb = np.stack([image[y - p // 2:y + p // 2, x - p // 2:x + p // 2]
                             .reshape(-1, 3).mean(0) / 255.0 for x, y in centers])
        expr = bias + (mean_rgb - 0.5) @ weight.T
        if cfg.noise > 0:
            expr = expr + rng.normal(0.0, cfg.noise, size=expr.shape)
        expr = _stable_log1p(np.clip(expr, 0.0, None))
        raws.append({
            "slide_id": slide_id, "patient_id": f"P{i % cfg.n_patients}",
            "split": TEST if i >= cfg.n_slides - cfg.n_test_slides else TRAIN,
            "image": image, "spot_ids": [f"s{k:04d}" for k in range(len(centers))],
            "centers": np.array(centers, dtype=np.int64), "counts": np.expm1(expr),
        })
    names = [f"gene_{j:03d}" for j in range(cfg.n_genes)]
    slides, kept_names, kept, record = _preprocess({"gene_names": names, "slides": raws},
                                                   cfg.n_genes, 0)
    record["n_slides"] = len(slides)
    record["n_patients"] = len({s.patient_id for s in slides})
    record["n_boundary_skipped"] = 0
    record["patch_size"] = int(p)
    record["synthetic"] = {
        "seed": int(seed),
        "config": dataclasses.asdict(cfg),
        "weight": weight[kept].tolist(),
        "bias": bias[kept].tolist(),
        "palette": palette.tolist(),
    }
    return DatasetBundle(slides, kept_names, record)


def spot_table(bundle, split=None, patch_size=None):
    """Extract every spot patch of ``split`` (all slides when None)."""
    p = patch_size or bundle.preprocessing_log.get("patch_size")
    if not p:
        raise ConfigError("patch size unknown; pass patch_size")
    patches, targets, centers, slide_index, spot_ids = [], [], [], [], []
    slide_ids, shapes = [], []
    for s in bundle.slides:
        if split is not None and s.split != split:
            continue
        k = len(slide_ids)
        slide_ids.append(s.slide_id)
        shapes.append(tuple(int(v) for v in s.shape))
        for spot in s.spots:
            try:
                patches.append(extract_patch(s, spot.center, p))
            except BoundaryError:
                log.info("skipping boundary spot %s/%s", s.slide_id, spot.spot_id)
                continue
            targets.append(spot.expression)
            centers.append(spot.center)
            slide_index.append(k)
            spot_ids.append(spot.spot_id)
    g = bundle.n_genes
    return SpotTable(
        patches=np.stack(patches) if patches else np.zeros((0, p, p, 3), np.uint8),
        targets=np.asarray(targets, dtype=np.float32).reshape(-1, g),
        centers=np.asarray(centers, dtype=np.float64).reshape(-1, 2),
        slide_index=np.asarray(slide_index, dtype=np.int64),
        spot_ids=spot_ids, slide_ids=slide_ids, slide_shapes=shapes,
    )
