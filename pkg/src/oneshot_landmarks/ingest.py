"""Dataset loading, resizing, and deterministic synthetic data.

On-disk layout::

    root/images/<id>.png        (or .pgm), 8-bit grayscale
    root/annotations/<id>.csv   landmark_id,x,y  (original-frame pixels, 0-indexed)
    root/split.json             {"train": [...], "test": [...], "template": id,
                                 "spacing_mm": float, "num_landmarks": K}
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .datamodel import Frame, ImageRecord, LandmarkPoint, ResizeTransform
from .errors import ConfigError, DataError, SchemaError

IMAGE_SUFFIXES = (".png", ".pgm")


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[ImageRecord, ...]
    test: tuple[ImageRecord, ...]
    template: ImageRecord
    K: int

    def __post_init__(self):
        if self.template.ground_truth is None or len(self.template.ground_truth) != self.K:
            raise ConfigError(f"template must carry {self.K} ground-truth landmarks")
        train_ids = {r.id for r in self.train}
        overlap = train_ids & {r.id for r in self.test}
        if overlap:
            raise ConfigError(f"train and test share ids: {sorted(overlap)}")
        if self.template.id not in train_ids:
            raise ConfigError(f"template {self.template.id!r} is not in the training pool")

    @property
    def input_size(self) -> int:
        return self.template.input_size


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------

def to_unit_gray(pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim == 3:
        raise DataError("expected a single-channel image")
    return (pixels.astype(np.float32) / 255.0).astype(np.float32)


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a float ``[H, W]`` image to ``size x size``."""
    if img.shape == (size, size):
        return img.copy()
    out = Image.fromarray(img.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)
    return np.asarray(out, dtype=np.float32).copy()


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I"):
            im = im.convert("L")
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        # 16-bit sources are rescaled to the 8-bit range before normalization.
        arr = arr.astype(np.float64) * (255.0 / max(float(arr.max()), 1.0))
    return to_unit_gray(arr)


def write_image(path: Path, img: np.ndarray) -> None:
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path)


def make_record(image_id: str, original: np.ndarray, input_size: int,
                ground_truth=None, spacing_mm: float = 1.0) -> ImageRecord:
    resized = resize_image(original, input_size)
    t = ResizeTransform.between(original.shape, resized.shape)
    gt = None if ground_truth is None else tuple(ground_truth)
    return ImageRecord(image_id, original.astype(np.float32), resized, t, gt, spacing_mm)


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------

def read_annotation(path: Path, K: int) -> tuple[LandmarkPoint, ...]:
    if not path.is_file():
        raise DataError(f"missing annotation file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != {"landmark_id", "x", "y"}:
        raise SchemaError(f"{path}: expected columns landmark_id,x,y, got {list(rows[0])}")
    if len(rows) != K:
        raise SchemaError(f"{path}: expected {K} landmark rows, found {len(rows)}")
    try:
        ids = [int(r["landmark_id"]) for r in rows]
        pts = [LandmarkPoint(float(r["x"]), float(r["y"]), Frame.ORIGINAL) for r in rows]
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    if ids != list(range(1, K + 1)):
        raise SchemaError(f"{path}: landmark ids must be 1..{K} in order, got {ids}")
    return tuple(pts)


def write_annotation(path: Path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["landmark_id", "x", "y"])
        for k, p in enumerate(points, start=1):
            w.writerow([k, repr(float(p.x)), repr(float(p.y))])


def convert_isbi_annotation(txt_path: Path, out_csv: Path, K: int = 19) -> None:
    """Convert an ISBI 2015 ``.txt`` annotation (first K lines ``x,y``) to our CSV."""
    lines = [ln.strip() for ln in Path(txt_path).read_text().splitlines() if ln.strip()]
    if len(lines) < K:
        raise SchemaError(f"{txt_path}: expected at least {K} coordinate lines")
    pts = []
    for ln in lines[:K]:
        x, y = (float(v) for v in ln.split(",")[:2])
        pts.append(LandmarkPoint(x, y, Frame.ORIGINAL))
    write_annotation(out_csv, pts)


# ---------------------------------------------------------------------------
# Directory layout
# ---------------------------------------------------------------------------

def read_split(root: Path) -> dict:
    path = Path(root) / "split.json"
    if not path.is_file():
        raise DataError(f"missing {path}")
    meta = json.loads(path.read_text())
    for key in ("train", "test", "template", "spacing_mm", "num_landmarks"):
        if key not in meta:
            raise ConfigError(f"split.json lacks {key!r}")
    template = meta["template"]
    if not isinstance(template, str):
        raise ConfigError("split.json must flag exactly one template id")
    if meta["train"].count(template) != 1:
        raise ConfigError(f"template {template!r} must appear exactly once in the train list")
    return meta


def find_image(root: Path, image_id: str) -> Path:
    for suffix in IMAGE_SUFFIXES:
        p = Path(root) / "images" / f"{image_id}{suffix}"
        if p.is_file():
            return p
    raise DataError(f"missing image for id {image_id!r} under {Path(root) / 'images'}")


def load_dataset(root_dir, input_size: int = 384) -> DatasetSplit:
    """Load a dataset directory and resize every image to ``input_size``.

    All annotations are kept in the original frame. Only the template's
    annotations are meant for training; the rest serve evaluation.
    """
    root = Path(root_dir)
    meta = read_split(root)
    K = int(meta["num_landmarks"])
    spacing = float(meta["spacing_mm"])

    def load(image_id: str) -> ImageRecord:
        img = read_image(find_image(root, image_id))
        gt = read_annotation(root / "annotations" / f"{image_id}.csv", K)
        return make_record(image_id, img, input_size, gt, spacing)

    train = tuple(load(i) for i in meta["train"])
    test = tuple(load(i) for i in meta["test"])
    template = next(r for r in train if r.id == meta["template"])
    return DatasetSplit(train, test, template, K)


def write_dataset(split: DatasetSplit, root_dir) -> Path:
    root = Path(root_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    for rec in split.train + split.test:
        write_image(root / "images" / f"{rec.id}.png", rec.original)
        write_annotation(root / "annotations" / f"{rec.id}.csv", rec.ground_truth)
    meta = {
        "train": [r.id for r in split.train],
        "test": [r.id for r in split.test],
        "template": split.template.id,
        "spacing_mm": split.template.spacing_mm,
        "num_landmarks": split.K,
    }
    (root / "split.json").write_text(json.dumps(meta, indent=2) + "\n")
    return root


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Synthetic dataset parameters.

    ``layout="distinct"`` gives every landmark its own motif on a fixed smooth
    background. ``layout="twin"`` draws two landmark groups: landmark ``k`` in
    the upper group and landmark ``k + K/2`` in the lower group share one motif
    on a flat background, so their local appearance is identical and only
    image-level context tells them apart.
    """

    n_train: int = 40
    n_test: int = 20
    image_size: int = 192
    K: int = 4
    noise_std: float = 0.02
    shape_jitter_px: float = 6.0
    seed: int = 0
    patch_size: int | None = None
    motif_radius: int | None = None
    layout: str = "distinct"

    def __post_init__(self):
        if self.n_train < 2:
            raise ConfigError("n_train must be at least 2")
        if self.n_test < 0:
            raise ConfigError("n_test must be non-negative")
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if self.image_size < 64:
            raise ConfigError("image_size must be at least 64")
        if not 0.0 <= self.noise_std <= 1.0:
            raise ConfigError("noise_std must lie in [0, 1]")
        if self.shape_jitter_px < 0:
            raise ConfigError("shape_jitter_px must be non-negative")
        if self.layout not in ("distinct", "twin"):
            raise ConfigError(f"unknown layout {self.layout!r}")
        if self.layout == "twin" and self.K % 2:
            raise ConfigError("twin layout needs an even K")

    @property
    def patch(self) -> int:
        return self.patch_size if self.patch_size is not None else self.image_size // 2

    @property
    def radius(self) -> int:
        return self.motif_radius if self.motif_radius is not None else max(4, self.image_size // 16)


def render_motif(index: int, count: int, radius: int) -> np.ndarray:
    """Opaque disk motif; returns ``[2r+1, 2r+1]`` values with NaN outside the disk.

    Each index gets its own corner orientation and grating frequency, and the
    center pixel is a bright dot so the motif center is sharply defined.
    """
    r = radius
    v, u = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    theta = 2 * math.pi * index / max(count, 1) + 0.3
    a = u * math.cos(theta) + v * math.sin(theta)
    b = -u * math.sin(theta) + v * math.cos(theta)
    freq = 0.12 + 0.1 * (index % 4) + 0.05 * (index // 4)
    corner = ((a >= 0) & (b >= 0)).astype(np.float64)
    grating = 0.5 + 0.5 * np.cos(2 * math.pi * freq * a)
    out = 0.15 + 0.55 * corner + 0.3 * grating * (1 - corner)
    out[np.hypot(u, v) <= 1.0] = 1.0
    out[np.hypot(u, v) > r] = np.nan
    return out


def _background(size: int, rng: np.random.Generator, flat: bool) -> np.ndarray:
    if flat:
        return np.full((size, size), 0.35)
    coarse = rng.uniform(0.0, 1.0, size=(6, 6)).astype(np.float32)
    smooth = np.asarray(Image.fromarray(coarse, mode="F").resize((size, size), Image.BICUBIC), dtype=np.float64)
    return 0.2 + 0.3 * np.clip(smooth, 0.0, 1.0)


def _base_positions(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    S, half, r, j = cfg.image_size, cfg.patch / 2, cfg.radius, math.ceil(cfg.shape_jitter_px)
    lo, hi = math.ceil(half + j), math.floor(S - half - j)
    if lo > hi:
        raise ConfigError("jitter too large for the croppable region")
    if cfg.layout == "twin":
        g = cfg.K // 2
        xs = np.linspace(lo, hi, g) if g > 1 else np.array([(lo + hi) / 2])
        upper = [(round(x), lo) for x in xs]
        lower = [(round(x), hi) for x in xs]
        return np.array(upper + lower, dtype=np.int64)
    min_sep = 2 * r + 2 * j + 2
    for _ in range(10000):
        pts = rng.integers(lo, hi + 1, size=(cfg.K, 2))
        d = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
        if cfg.K == 1 or d[np.triu_indices(cfg.K, 1)].min() >= min_sep:
            return pts
    raise ConfigError("cannot place motifs with the requested separation; reduce K or radius")


def synth_motif_bank(cfg: SynthConfig) -> list[np.ndarray]:
    """The motif stamped at each landmark (twin layout repeats motifs)."""
    if cfg.layout == "twin":
        g = cfg.K // 2
        motifs = [render_motif(i, g, cfg.radius) for i in range(g)]
        return motifs + motifs
    return [render_motif(i, cfg.K, cfg.radius) for i in range(cfg.K)]


def generate_synthetic(cfg: SynthConfig) -> DatasetSplit:
    """Deterministic synthetic split; the first training image is the template."""
    rng = np.random.default_rng(cfg.seed)
    S, r = cfg.image_size, cfg.radius
    background = _background(S, rng, flat=cfg.layout == "twin")
    base = _base_positions(cfg, rng)
    motifs = synth_motif_bank(cfg)
    lo, hi = cfg.patch / 2, S - cfg.patch / 2

    def one(image_id: str) -> ImageRecord:
        img = background.copy()
        jit = rng.uniform(-cfg.shape_jitter_px, cfg.shape_jitter_px, size=base.shape)
        pos = np.clip(np.rint(base + jit), math.ceil(lo), math.floor(hi)).astype(np.int64)
        for (x, y), m in zip(pos, motifs):
            window = img[y - r:y + r + 1, x - r:x + r + 1]
            mask = ~np.isnan(m)
            window[mask] = m[mask]
        if cfg.noise_std > 0:
            img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
        img = (np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)
        gt = tuple(LandmarkPoint(float(x), float(y), Frame.ORIGINAL) for x, y in pos)
        return make_record(image_id, img, S, gt, 1.0)

    train = tuple(one(f"train_{i:04d}") for i in range(cfg.n_train))
    test = tuple(one(f"test_{i:04d}") for i in range(cfg.n_test))
    return DatasetSplit(train, test, train[0], cfg.K)
