"""Template augmentation, patch cropping, and patch augmentation.

Affine convention: a matrix maps *source* pixel coordinates to *output*
coordinates, ``out = A @ (src - c) + c + shift`` with ``A = R(theta) * s`` and
``c`` the pixel-grid center ``((W-1)/2, (H-1)/2)``. Warping samples the source
at the inverse map with bilinear interpolation and zero fill.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .datamodel import Frame, ImageRecord, LandmarkPoint, in_croppable_region
from .errors import AugmentationRangeError, ConfigError, ContractError

MAX_REDRAWS = 1000

Range = tuple[float, float]


@dataclass(frozen=True)
class AffineAugParams:
    shift_px: Range = (-10.0, 10.0)
    rotation_deg: Range = (-15.0, 15.0)
    scale: Range = (0.9, 1.1)
    brightness: Range = (-0.15, 0.15)
    contrast: Range = (0.85, 1.15)

    def __post_init__(self):
        for name in ("shift_px", "rotation_deg", "scale", "brightness", "contrast"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"aug.{name}: min {lo} exceeds max {hi}")
        if self.scale[0] <= 0:
            raise ConfigError("aug.scale must be positive")
        if self.contrast[0] < 0:
            raise ConfigError("aug.contrast must be non-negative")

    @classmethod
    def identity(cls) -> AffineAugParams:
        return cls((0.0, 0.0), (0.0, 0.0), (1.0, 1.0), (0.0, 0.0), (1.0, 1.0))


@dataclass(frozen=True)
class Affine:
    """2x3 map from source ``(x, y)`` to output ``(x, y)``."""

    matrix: np.ndarray  # [2, 3]

    @classmethod
    def about_center(cls, size_hw, shift=(0.0, 0.0), rotation_deg=0.0, scale=1.0) -> Affine:
        h, w = size_hw
        c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        th = math.radians(rotation_deg)
        a = scale * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        t = c + np.asarray(shift, dtype=np.float64) - a @ c
        return cls(np.hstack([a, t[:, None]]))

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])))

    def apply(self, x: float, y: float) -> tuple[float, float]:
        out = self.matrix[:, :2] @ np.array([x, y]) + self.matrix[:, 2]
        return float(out[0]), float(out[1])

    def warp(self, image: np.ndarray) -> np.ndarray:
        if self.is_identity:
            return image.copy()
        h, w = image.shape
        a, t = self.matrix[:, :2], self.matrix[:, 2]
        inv = np.linalg.inv(a)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        pts = np.stack([xs.ravel() - t[0], ys.ravel() - t[1]])
        src = inv @ pts
        coords = np.stack([src[1], src[0]])  # ndimage wants (row, col)
        out = ndimage.map_coordinates(image.astype(np.float64), coords, order=1, mode="constant", cval=0.0)
        return out.reshape(h, w).astype(image.dtype)


def _draw(rng: np.random.Generator, rng_pair: Range) -> float:
    lo, hi = rng_pair
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def random_affine(size_hw, params: AffineAugParams, rng: np.random.Generator) -> Affine:
    # Draw order is fixed for reproducibility: shift x, shift y, rotation, scale.
    sx, sy = _draw(rng, params.shift_px), _draw(rng, params.shift_px)
    rot, sc = _draw(rng, params.rotation_deg), _draw(rng, params.scale)
    return Affine.about_center(size_hw, (sx, sy), rot, sc)


@dataclass(frozen=True, eq=False)
class Patch:
    pixels: np.ndarray  # [P, P]
    source_image_id: str
    center_in_source: LandmarkPoint
    center_in_patch: LandmarkPoint

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class TemplateSet:
    items: tuple[tuple[np.ndarray, tuple[LandmarkPoint, ...]], ...]

    @property
    def size(self) -> int:
        return len(self.items)

    def __len__(self) -> int:
        return len(self.items)


def build_augmented_template_set(template: ImageRecord, params: AffineAugParams, n: int,
                                 seed: int, patch_size: int) -> TemplateSet:
    """Draw ``n`` random affine copies of the resized template with mapped landmarks.

    Only the geometric ranges of ``params`` apply here. Samples whose
    landmarks leave the croppable region are redrawn.
    """
    if template.ground_truth is None:
        raise ContractError("template has no ground truth")
    rng = np.random.default_rng(seed)
    img = template.resized
    S = img.shape[0]
    gts = [template.gt_resized(k) for k in range(1, template.num_landmarks + 1)]
    items = []
    for _ in range(n):
        for _attempt in range(MAX_REDRAWS):
            aff = random_affine(img.shape, params, rng)
            pts = tuple(LandmarkPoint(*aff.apply(p.x, p.y), Frame.RESIZED) for p in gts)
            if all(in_croppable_region(p, S, patch_size) for p in pts):
                break
        else:
            raise AugmentationRangeError(
                f"{MAX_REDRAWS} consecutive template draws pushed landmarks out of the croppable region"
            )
        out = aff.warp(img)
        out.setflags(write=False)
        items.append((out, pts))
    return TemplateSet(tuple(items))


def crop_patch(image: np.ndarray, center: LandmarkPoint, patch_size: int, image_id: str = "") -> Patch:
    """Axis-aligned crop of ``patch_size`` pixels centered on ``center``.

    Integral corners copy pixels directly; sub-pixel corners resample bilinearly
    so the tracked center stays at ``patch_size / 2``.
    """
    h, w = image.shape
    half = patch_size / 2
    x0, y0 = center.x - half, center.y - half
    if x0 < 0 or y0 < 0 or center.x + half > w or center.y + half > h:
        raise ContractError(
            f"center ({center.x}, {center.y}) is closer than {half} px to the border of a {w}x{h} image"
        )
    if float(x0).is_integer() and float(y0).is_integer():
        xi, yi = int(x0), int(y0)
        pixels = image[yi:yi + patch_size, xi:xi + patch_size].copy()
    else:
        ys, xs = np.mgrid[0:patch_size, 0:patch_size].astype(np.float64)
        coords = np.stack([ys + y0, xs + x0])
        pixels = ndimage.map_coordinates(image.astype(np.float64), coords, order=1, mode="nearest")
        pixels = pixels.astype(image.dtype)
    src = LandmarkPoint(center.x, center.y, Frame.RESIZED)
    return Patch(pixels, image_id, src, LandmarkPoint(half, half, Frame.PATCH))


def photometric(pixels: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    if brightness == 0.0 and contrast == 1.0:
        return pixels
    out = (pixels - 0.5) * contrast + 0.5 + brightness
    return np.clip(out, 0.0, 1.0).astype(pixels.dtype)


def augment_patch(patch: Patch, params: AffineAugParams, seed) -> Patch:
    """Random affine plus brightness/contrast jitter with center tracking.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = np.random.default_rng(seed)
    P = patch.size
    c = patch.center_in_patch
    for _ in range(MAX_REDRAWS):
        aff = random_affine(patch.pixels.shape, params, rng)
        nx, ny = aff.apply(c.x, c.y)
        if 0 <= nx <= P - 1 and 0 <= ny <= P - 1:
            break
    else:
        raise AugmentationRangeError(f"{MAX_REDRAWS} consecutive patch draws moved the center out of the patch")
    b, k = _draw(rng, params.brightness), _draw(rng, params.contrast)
    pixels = photometric(aff.warp(patch.pixels), b, k)
    return Patch(pixels, patch.source_image_id, patch.center_in_source, LandmarkPoint(nx, ny, Frame.PATCH))
