"""Stub embedders with known-correct behavior, used to check the matching pipeline.

They expose the same ``embed(images, k)`` surface as ``AdapterBank`` so the
trainer's stages can run on them unchanged.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .network import NUM_LEVELS


class MotifCodeEmbedder(nn.Module):
    """One-hot code at the exact center of every stamped motif, zero elsewhere.

    A motif is detected where the disk-masked sum of squared differences to
    its 8-bit quantized stamp vanishes, which on noiseless synthetic images
    happens exactly at motif centers. Code ``j`` is placed at
    ``floor(center / 2^(i-1))`` on level ``i``.
    """

    def __init__(self, motifs: list[np.ndarray], tol: float = 1e-6):
        super().__init__()
        # identical motifs share one code
        uniq: list[np.ndarray] = []
        for m in motifs:
            if not any(u.shape == m.shape and np.array_equal(np.isnan(u), np.isnan(m))
                       and np.allclose(np.nan_to_num(u), np.nan_to_num(m)) for u in uniq):
                uniq.append(m)
        self.num_codes = len(uniq)
        stamps, masks = [], []
        for m in uniq:
            mask = ~np.isnan(m)
            q = np.rint(np.clip(np.nan_to_num(m), 0, 1) * 255.0) / 255.0
            q = q.astype(np.float32).astype(np.float64)
            stamps.append(q * mask)
            masks.append(mask.astype(np.float64))
        self.register_buffer("stamps", torch.tensor(np.stack(stamps))[:, None])
        self.register_buffer("masks", torch.tensor(np.stack(masks))[:, None])
        self.energy = [float((s ** 2).sum()) for s in stamps]
        self.tol = tol
        self.radius = uniq[0].shape[0] // 2

    def detect(self, images: torch.Tensor) -> torch.Tensor:
        """``[B, 1, S, S]`` -> boolean ``[B, codes, S, S]`` exact-match map."""
        x = images.to(torch.float64)
        r = self.radius
        img_energy = F.conv2d(x ** 2, self.masks, padding=r)
        cross = F.conv2d(x, self.stamps, padding=r)
        energy = torch.tensor(self.energy, dtype=torch.float64)[None, :, None, None]
        ssd = img_energy - 2 * cross + energy
        return ssd.abs() < self.tol

    def embed(self, images: torch.Tensor, k: int) -> list[torch.Tensor]:
        hits = self.detect(images)
        B, C, S, _ = hits.shape
        out = []
        for i in range(NUM_LEVELS):
            s = S >> i
            level = torch.zeros(B, C, s, s)
            b, c, y, x = torch.nonzero(hits, as_tuple=True)
            level[b, c, y // 2 ** i, x // 2 ** i] = 1.0
            out.append(level)
        return out

    forward = embed


class PositionalCodeEmbedder(nn.Module):
    """Embeds pixel ``(x, y)`` of the *source* frame as a one-hot code over all source positions.

    ``offset`` shifts local coordinates into the source frame for inputs
    smaller than the source (patches), so a patch cut at ``(x0, y0)`` embedded
    with ``offset=(x0, y0)`` shares codes with the full image. Full-size inputs
    are never offset. Level ``i`` codes the coarse cell ``floor(src / 2^(i-1))``.
    """

    def __init__(self, source_size: int):
        super().__init__()
        self.source_size = source_size
        self.offset = (0, 0)

    def embed(self, images: torch.Tensor, k: int) -> list[torch.Tensor]:
        B, _, S, _ = images.shape
        ox, oy = self.offset if S < self.source_size else (0, 0)
        out = []
        for i in range(NUM_LEVELS):
            scale = 2 ** i
            n = self.source_size // scale
            s = S // scale
            ys, xs = torch.meshgrid(torch.arange(s), torch.arange(s), indexing="ij")
            code = (ys + oy // scale) * n + (xs + ox // scale)
            emb = F.one_hot(code, n * n).permute(2, 0, 1).float()
            out.append(emb[None].expand(B, -1, -1, -1))
        return out

    forward = embed
