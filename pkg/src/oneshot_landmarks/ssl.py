"""Self-supervised patch-to-image matching: training loss and cascade inference.

A patch is embedded by the same bank as the full image; the embedding at the
patch's tracked center (one vector per pyramid level) is compared by cosine
similarity with every pixel of the image pyramid. Training pushes a
temperature softmax over each map toward the patch center's true location;
inference takes the argmax at the coarsest level and refines it inside a
local window at each finer level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .augment import Patch
from .datamodel import Frame, LandmarkPoint
from .errors import ConfigError, ContractError
from .network import NUM_LEVELS

ZERO_NORM = 1e-12
FULL_SOFTMAX_LEVELS = (4, 5)  # the two coarsest levels


@dataclass(frozen=True)
class CascadeConfig:
    window_px: int = 4
    tau: float = 0.07

    def __post_init__(self):
        if self.window_px < 1:
            raise ConfigError("ssl.window_px must be >= 1")
        if not self.tau > 0:
            raise ConfigError("ssl.tau must be > 0")


@dataclass
class SimilarityStack:
    """Five cosine maps, finest first; ``valid[i]`` is False when level i's center vector was zero."""

    maps: list[torch.Tensor]
    target: LandmarkPoint | None = None
    valid: list[bool] = field(default_factory=lambda: [True] * NUM_LEVELS)


def level_index(coord: float, level: int) -> int:
    """Grid index of a full-resolution coordinate at pyramid ``level`` (1 = finest)."""
    return int(math.floor(coord / 2 ** (level - 1)))


# ---------------------------------------------------------------------------
# Batched primitives
# ---------------------------------------------------------------------------

def gather_centers(pyramid: Sequence[torch.Tensor], centers_xy: torch.Tensor):
    """Normalized embedding at each sample's center on every level.

    ``pyramid[i]`` is ``[B, E, h, w]``; ``centers_xy`` is ``[B, 2]`` full-res
    ``(x, y)``. Returns ``(vectors, valid)`` lists with ``[B, E]`` and ``[B]``
    entries; zero vectors stay zero and are marked invalid.
    """
    vecs, valid = [], []
    b = torch.arange(centers_xy.shape[0])
    for i, emb in enumerate(pyramid):
        scale = 2 ** i
        h, w = emb.shape[-2:]
        ix = torch.clamp(torch.div(centers_xy[:, 0], scale, rounding_mode="floor").long(), 0, w - 1)
        iy = torch.clamp(torch.div(centers_xy[:, 1], scale, rounding_mode="floor").long(), 0, h - 1)
        v = emb[b, :, iy, ix]
        norm = v.norm(dim=1)
        ok = norm > ZERO_NORM
        vecs.append(torch.where(ok[:, None], v / norm.clamp_min(ZERO_NORM)[:, None], torch.zeros_like(v)))
        valid.append(ok)
    return vecs, valid


def cosine_maps(pyramid: Sequence[torch.Tensor], vectors: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """``[B, E, h, w]`` x ``[B, E]`` -> ``[B, h, w]`` cosine similarity per level."""
    out = []
    for emb, v in zip(pyramid, vectors):
        q = F.normalize(emb, dim=1, eps=ZERO_NORM)
        c = F.normalize(v, dim=1, eps=ZERO_NORM)
        out.append(torch.einsum("behw,be->bhw", q, c))
    return out


def window_mask(h: int, w: int, tx: torch.Tensor, ty: torch.Tensor, half: int) -> torch.Tensor:
    """``[B, h, w]`` boolean mask of the ``(2*half+1)^2`` window around each target, clipped to the map."""
    rows = torch.arange(h)[None, :, None]
    cols = torch.arange(w)[None, None, :]
    return ((rows - ty[:, None, None]).abs() <= half) & ((cols - tx[:, None, None]).abs() <= half)


def matching_loss(maps: Sequence[torch.Tensor], targets_xy: torch.Tensor, valid: Sequence[torch.Tensor],
                  cfg: CascadeConfig) -> torch.Tensor:
    """Per-sample loss ``[B]``: summed per-level cross-entropy of ``softmax(map / tau)``.

    Levels 4 and 5 normalize over the whole map; finer levels only over the
    window around the downscaled target.
    """
    total = torch.zeros(targets_xy.shape[0], dtype=maps[0].dtype)
    for i, m in enumerate(maps):
        level = i + 1
        B, h, w = m.shape
        tx = torch.div(targets_xy[:, 0], 2 ** i, rounding_mode="floor").long()
        ty = torch.div(targets_xy[:, 1], 2 ** i, rounding_mode="floor").long()
        if ((tx < 0) | (tx >= w) | (ty < 0) | (ty >= h)).any():
            raise ContractError(f"target outside level {level} map of size {h}x{w}")
        logits = m / cfg.tau
        if level not in FULL_SOFTMAX_LEVELS:
            logits = logits.masked_fill(~window_mask(h, w, tx, ty, cfg.window_px), float("-inf"))
        logp = F.log_softmax(logits.reshape(B, -1), dim=1)
        nll = -logp[torch.arange(B), ty * w + tx]
        total = total + torch.where(valid[i], nll, torch.zeros_like(nll))
    return total


def argmax_2d(m: torch.Tensor) -> tuple[int, int]:
    """Row-major-first argmax of a ``[h, w]`` map, returned as ``(x, y)``."""
    flat = int(torch.argmax(m.reshape(-1)))
    w = m.shape[1]
    return flat % w, flat // w


def cascade_argmax(maps: Sequence[torch.Tensor], window_px: int) -> tuple[int, int]:
    """Coarse-to-fine argmax over ``[h_i, w_i]`` maps ordered finest first."""
    x, y = argmax_2d(maps[-1])
    for m in reversed(maps[:-1]):
        h, w = m.shape
        cx, cy = 2 * x, 2 * y
        x0, x1 = max(cx - window_px, 0), min(cx + window_px, w - 1)
        y0, y1 = max(cy - window_px, 0), min(cy + window_px, h - 1)
        if x0 > x1 or y0 > y1:
            # upscaled estimate fell outside the map; search the nearest edge band
            x0, x1 = min(x0, w - 1), min(x1, w - 1)
            y0, y1 = min(y0, h - 1), min(y1, h - 1)
        dx, dy = argmax_2d(m[y0:y1 + 1, x0:x1 + 1])
        x, y = x0 + dx, y0 + dy
    return x, y


# ---------------------------------------------------------------------------
# Single-sample operations
# ---------------------------------------------------------------------------

def patch_tensor(pixels) -> torch.Tensor:
    t = torch.as_tensor(pixels, dtype=torch.float32)
    return t[None, None]


def patch_center_embeddings(bank, patch: Patch, k: int) -> tuple[list[torch.Tensor], list[bool]]:
    """Embed ``patch`` with landmark ``k`` active and read each level at the tracked center.

    Returns five unit vectors (or zero vectors, flagged False in the second list).
    """
    if patch.size % 16:
        raise ContractError(f"patch size {patch.size} is not divisible by 16")
    pyr = bank.embed(patch_tensor(patch.pixels).to(_dtype(bank)), k)
    c = torch.tensor([[patch.center_in_patch.x, patch.center_in_patch.y]], dtype=torch.float64)
    vecs, valid = gather_centers(pyr, c)
    return [v[0] for v in vecs], [bool(o[0]) for o in valid]


def similarity_maps(query: Sequence[torch.Tensor], centers: Sequence[torch.Tensor],
                    target: LandmarkPoint | None = None) -> SimilarityStack:
    """Cosine similarity of every query pixel embedding with the center vector of its level.

    ``query[i]`` is ``[E, h, w]`` (or ``[1, E, h, w]``), ``centers[i]`` is ``[E]``.
    """
    q = [e if e.dim() == 4 else e[None] for e in query]
    for e, c in zip(q, centers):
        if e.shape[1] != c.shape[-1]:
            raise ContractError(f"embedding dims differ: query {e.shape[1]} vs center {c.shape[-1]}")
    maps = cosine_maps(q, [c.reshape(1, -1).to(e.dtype) for e, c in zip(q, centers)])
    valid = [bool(c.norm() > ZERO_NORM) for c in centers]
    return SimilarityStack([m[0] for m in maps], target, valid)


def ssl_training_loss(stack: SimilarityStack, cfg: CascadeConfig) -> torch.Tensor:
    if stack.target is None:
        raise ContractError("training loss needs a target location")
    t = torch.tensor([[stack.target.x, stack.target.y]], dtype=torch.float64)
    valid = [torch.tensor([v]) for v in stack.valid]
    return matching_loss([m[None] for m in stack.maps], t, valid, cfg)[0]


def cascade_infer(stack: SimilarityStack, cfg: CascadeConfig) -> LandmarkPoint:
    x, y = cascade_argmax([m.detach() for m in stack.maps], cfg.window_px)
    return LandmarkPoint(float(x), float(y), Frame.RESIZED)


def _dtype(module) -> torch.dtype:
    for p in module.parameters():
        return p.dtype
    return torch.float32
