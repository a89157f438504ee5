"""Radial error, MRE and SDR, and per-landmark reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datamodel import Frame, LandmarkPoint, ResizeTransform, map_coords
from .errors import ContractError

DEFAULT_THRESHOLDS_MM = (2.0, 2.5, 3.0, 4.0)


def radial_errors(preds: Sequence[LandmarkPoint], gts: Sequence[LandmarkPoint], transform: ResizeTransform,
                  spacing_mm: float) -> list[float]:
    """Distances in mm between resized-frame predictions and original-frame ground truth.

    Predictions already in the original frame are measured as they are.
    """
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} predictions vs {len(gts)} ground-truth points")
    if not spacing_mm > 0:
        raise ContractError("spacing_mm must be positive")
    out = []
    for p, g in zip(preds, gts):
        if p.frame == Frame.RESIZED:
            p = map_coords(p, transform, "to_original")
        out.append(p.distance(g) * spacing_mm)
    return out


def compute_mre(distances: Sequence[float]) -> float:
    if len(distances) == 0:
        raise ContractError("MRE of an empty distance list")
    return math.fsum(distances) / len(distances)


def compute_sdr(distances: Sequence[float], thresholds: Sequence[float] = DEFAULT_THRESHOLDS_MM) -> list[float]:
    """Percent of distances ``<= t`` for each threshold ``t`` (boundary counts as detected)."""
    if len(distances) == 0:
        raise ContractError("SDR of an empty distance list")
    if any(t <= 0 for t in thresholds) or list(thresholds) != sorted(thresholds):
        raise ContractError("thresholds must be positive and ascending")
    d = np.asarray(distances, dtype=np.float64)
    return [100.0 * float(np.count_nonzero(d <= t)) / d.size for t in thresholds]


def _threshold_key(t: float) -> str:
    return "sdr" + (f"{t:g}".replace(".", "_"))


@dataclass
class EvaluationReport:
    per_landmark: dict[int, dict[str, float]]
    aggregate: dict[str, float]
    n_images: int
    thresholds_mm: list[float] = field(default_factory=lambda: list(DEFAULT_THRESHOLDS_MM))

    @property
    def columns(self) -> list[str]:
        return ["mre_mm"] + [_threshold_key(t) for t in self.thresholds_mm]

    def rows(self) -> list[list]:
        rows = [[k] + [self.per_landmark[k][c] for c in self.columns] for k in sorted(self.per_landmark)]
        rows.append(["mean"] + [self.aggregate[c] for c in self.columns])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["landmark_id"] + self.columns)
        for row in self.rows():
            w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "n_images": self.n_images,
            "thresholds_mm": self.thresholds_mm,
            "per_landmark": {str(k): v for k, v in sorted(self.per_landmark.items())},
            "aggregate": self.aggregate,
        }, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv())
        (out / "report.json").write_text(self.to_json())


def summarize(distances: Sequence[float], thresholds: Sequence[float]) -> dict[str, float]:
    row = {"mre_mm": compute_mre(distances)}
    row.update({_threshold_key(t): s for t, s in zip(thresholds, compute_sdr(distances, thresholds))})
    return row


def report_from_distances(distances: Mapping[int, Sequence[float]], K: int, n_images: int,
                          thresholds: Sequence[float] = DEFAULT_THRESHOLDS_MM) -> EvaluationReport:
    missing = [k for k in range(1, K + 1) if not distances.get(k)]
    if missing:
        raise ContractError(f"no distances for landmarks {missing}")
    per = {k: summarize(distances[k], thresholds) for k in range(1, K + 1)}
    flat = [d for k in range(1, K + 1) for d in distances[k]]
    return EvaluationReport(per, summarize(flat, thresholds), n_images, list(thresholds))


def per_landmark_report(preds: Mapping[int, Sequence[LandmarkPoint]], gts: Mapping[int, Sequence[LandmarkPoint]],
                        transforms: Sequence[ResizeTransform], spacing: float | Sequence[float], K: int,
                        thresholds: Sequence[float] = DEFAULT_THRESHOLDS_MM) -> EvaluationReport:
    """Per-landmark MRE/SDR rows plus a mean row over every (image, landmark) pair.

    ``preds[k]`` and ``gts[k]`` list one point per image, aligned with
    ``transforms`` (and ``spacing`` when it is a per-image sequence).
    """
    n = len(transforms)
    spacings = [float(spacing)] * n if np.isscalar(spacing) else [float(s) for s in spacing]
    dists = {}
    for k in range(1, K + 1):
        if k not in preds or k not in gts:
            raise ContractError(f"missing predictions or ground truth for landmark {k}")
        if not len(preds[k]) == len(gts[k]) == n:
            raise ContractError(f"landmark {k}: expected {n} predictions and ground-truth points")
        dists[k] = [radial_errors([p], [g], t, s)[0] for p, g, t, s in zip(preds[k], gts[k], transforms, spacings)]
    return report_from_distances(dists, K, n, thresholds)
