"""Core value types: landmark points, resize transforms, image records, pseudo-labels."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ContractError


class Frame(str, enum.Enum):
    ORIGINAL = "original"
    RESIZED = "resized"
    PATCH = "patch"


@dataclass(frozen=True)
class LandmarkPoint:
    """A sub-pixel location, ``x`` = column and ``y`` = row, zero-indexed."""

    x: float
    y: float
    frame: Frame = Frame.RESIZED

    def distance(self, other: LandmarkPoint) -> float:
        if self.frame != other.frame:
            raise ContractError(f"cannot measure {self.frame.value} against {other.frame.value} point")
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class ResizeTransform:
    """Scale factors original/resized per axis."""

    sx: float
    sy: float

    def __post_init__(self):
        if not (self.sx > 0 and self.sy > 0):
            raise ContractError(f"resize scales must be positive, got sx={self.sx}, sy={self.sy}")

    @classmethod
    def between(cls, original_hw: tuple[int, int], resized_hw: tuple[int, int]) -> ResizeTransform:
        (h0, w0), (h1, w1) = original_hw, resized_hw
        return cls(sx=w0 / w1, sy=h0 / h1)


IDENTITY = ResizeTransform(1.0, 1.0)


def map_coords(p: LandmarkPoint, t: ResizeTransform, direction: str) -> LandmarkPoint:
    """Map ``p`` between the resized and original frames.

    ``direction`` is ``"to_original"`` (multiply by the scales) or
    ``"to_resized"`` (divide).
    """
    if direction == "to_original":
        if p.frame != Frame.RESIZED:
            raise ContractError(f"to_original expects a resized-frame point, got {p.frame.value}")
        return LandmarkPoint(p.x * t.sx, p.y * t.sy, Frame.ORIGINAL)
    if direction == "to_resized":
        if p.frame != Frame.ORIGINAL:
            raise ContractError(f"to_resized expects an original-frame point, got {p.frame.value}")
        return LandmarkPoint(p.x / t.sx, p.y / t.sy, Frame.RESIZED)
    raise ContractError(f"unknown direction {direction!r}")


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One grayscale image at original and network resolution.

    ``original`` and ``resized`` are float32 ``[H, W]`` arrays in ``[0, 1]``.
    ``ground_truth`` holds K points in the original frame, ordered by landmark id.
    """

    id: str
    original: np.ndarray
    resized: np.ndarray
    transform: ResizeTransform
    ground_truth: tuple[LandmarkPoint, ...] | None = None
    spacing_mm: float = 1.0

    def __post_init__(self):
        if self.ground_truth is not None:
            for p in self.ground_truth:
                if p.frame != Frame.ORIGINAL:
                    raise ContractError("ground truth must be stored in the original frame")
        self.original.setflags(write=False)
        self.resized.setflags(write=False)

    @property
    def input_size(self) -> int:
        return self.resized.shape[0]

    @property
    def num_landmarks(self) -> int:
        return 0 if self.ground_truth is None else len(self.ground_truth)

    def gt_resized(self, k: int) -> LandmarkPoint:
        """Ground truth of landmark ``k`` (1-based) in the resized frame."""
        if self.ground_truth is None:
            raise ContractError(f"image {self.id} has no ground truth")
        return map_coords(self.ground_truth[k - 1], self.transform, "to_resized")


def croppable_bounds(image_size: int, patch_size: int) -> tuple[float, float]:
    """Inclusive range of coordinates at which a patch can be cropped."""
    half = patch_size / 2
    return half, image_size - half


def in_croppable_region(p: LandmarkPoint, image_size: int, patch_size: int) -> bool:
    lo, hi = croppable_bounds(image_size, patch_size)
    return lo <= p.x <= hi and lo <= p.y <= hi


def clamp_to_croppable(p: LandmarkPoint, image_size: int, patch_size: int) -> LandmarkPoint:
    lo, hi = croppable_bounds(image_size, patch_size)
    return LandmarkPoint(min(max(p.x, lo), hi), min(max(p.y, lo), hi), p.frame)


@dataclass
class PseudoLabelStore:
    """Current pseudo-labels per ``(image_id, landmark_id)``, resized frame.

    Every stored point must lie in the croppable region so that a patch can
    always be cut around it.
    """

    image_size: int
    patch_size: int
    entries: dict[tuple[str, int], LandmarkPoint] = field(default_factory=dict)
    epoch_stamp: int = 0

    def set(self, image_id: str, k: int, p: LandmarkPoint) -> None:
        if p.frame != Frame.RESIZED:
            raise ContractError("pseudo-labels live in the resized frame")
        if not in_croppable_region(p, self.image_size, self.patch_size):
            raise ContractError(
                f"pseudo-label ({p.x}, {p.y}) for {image_id}/{k} is outside the croppable region"
            )
        self.entries[(image_id, k)] = p

    def get(self, image_id: str, k: int) -> LandmarkPoint:
        try:
            return self.entries[(image_id, k)]
        except KeyError:
            raise ContractError(f"no pseudo-label for image {image_id!r}, landmark {k}") from None

    def is_complete(self, image_ids, k: int) -> bool:
        return all((i, k) in self.entries for i in image_ids)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[tuple[str, int], LandmarkPoint]]:
        return iter(sorted(self.entries.items()))

    def copy(self) -> PseudoLabelStore:
        return PseudoLabelStore(self.image_size, self.patch_size, dict(self.entries), self.epoch_stamp)
