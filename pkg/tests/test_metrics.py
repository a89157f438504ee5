from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oneshot_landmarks.datamodel import Frame, LandmarkPoint, ResizeTransform, map_coords
from oneshot_landmarks.errors import ContractError
from oneshot_landmarks.metrics import (compute_mre, compute_sdr, per_landmark_report, radial_errors,
                                       report_from_distances)

distances = st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=50)


def test_three_four_five():
    d = radial_errors([LandmarkPoint(3, 4)], [LandmarkPoint(0, 0, Frame.ORIGINAL)], ResizeTransform(1, 1), 0.1)
    assert d == [pytest.approx(0.5, abs=1e-15)]


def test_exact_prediction_is_zero():
    t = ResizeTransform(5.0390625, 6.25)
    g = LandmarkPoint(967.5, 1200.0, Frame.ORIGINAL)
    assert radial_errors([map_coords(g, t, "to_resized")], [g], t, 0.1) == [0.0]


def test_radial_errors_contract():
    with pytest.raises(ContractError):
        radial_errors([LandmarkPoint(0, 0)], [], ResizeTransform(1, 1), 1)
    with pytest.raises(ContractError):
        radial_errors([LandmarkPoint(0, 0)], [LandmarkPoint(0, 0, Frame.ORIGINAL)], ResizeTransform(1, 1), 0)


def test_radial_errors_against_brute_force(rng):
    for _ in range(1000):
        sx, sy = rng.uniform(0.2, 8, 2)
        sp = rng.uniform(0.01, 1)
        px, py, gx, gy = rng.uniform(0, 400, 4)
        d = radial_errors([LandmarkPoint(px, py)], [LandmarkPoint(gx, gy, Frame.ORIGINAL)],
                          ResizeTransform(sx, sy), sp)[0]
        assert abs(d - sp * math.sqrt((px * sx - gx) ** 2 + (py * sy - gy) ** 2)) < 1e-9


def test_frame_invariance(rng):
    t = ResizeTransform(3.0, 1.5)
    for _ in range(100):
        p = LandmarkPoint(*rng.uniform(0, 300, 2))
        g = LandmarkPoint(*rng.uniform(0, 600, 2), Frame.ORIGINAL)
        a = radial_errors([p], [g], t, 0.2)[0]
        b = radial_errors([map_coords(p, t, "to_original")], [g], t, 0.2)[0]
        assert a == b


def test_mre_examples():
    assert compute_mre([1, 2, 3]) == 2.0
    assert compute_mre([0.0] * 7) == 0.0
    with pytest.raises(ContractError):
        compute_mre([])


def test_mre_matches_64bit_oracle_on_run_fixture():
    fixture = json.loads((Path(__file__).parent / "fixtures" / "run_distances.json").read_text())["distances_mm"]
    oracle = float(np.sum(np.asarray(fixture, dtype=np.float64))) / len(fixture)
    assert abs(compute_mre(fixture) - oracle) < 1e-12


def test_sdr_examples():
    assert compute_sdr([1.0, 2.0, 2.5, 5.0], [2.0]) == [50.0]
    assert compute_sdr([1e9, 3.0], [math.inf]) == [100.0]
    with pytest.raises(ContractError):
        compute_sdr([1.0], [3.0, 2.0])
    with pytest.raises(ContractError):
        compute_sdr([1.0], [0.0])
    with pytest.raises(ContractError):
        compute_sdr([], [1.0])


@given(distances)
def test_sdr_monotone_and_full_at_max(ds):
    ts = sorted({0.5, 1.0, 2.0, 2.5, 3.0, 4.0, 10.0})
    s = compute_sdr(ds, ts)
    assert all(a <= b for a, b in zip(s, s[1:]))
    assert all(0 <= v <= 100 for v in s)
    if max(ds) > 0:
        assert compute_sdr(ds, [max(ds)]) == [100.0]


@given(distances, st.randoms())
def test_mre_permutation_invariant(ds, r):
    shuffled = list(ds)
    r.shuffle(shuffled)
    assert compute_mre(shuffled) == compute_mre(ds)


def test_report_examples():
    rep = report_from_distances({1: [1, 1], 2: [3, 3]}, K=2, n_images=2)
    assert rep.per_landmark[1]["mre_mm"] == 1.0 and rep.per_landmark[2]["mre_mm"] == 3.0
    assert rep.aggregate["mre_mm"] == 2.0
    assert len(rep.rows()) == 3
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["landmark_id", "mre_mm", "sdr2", "sdr2_5", "sdr3", "sdr4"]
    assert rows[-1][0] == "mean" and len(rows) == 4
    js = json.loads(rep.to_json())
    assert js["aggregate"]["sdr2"] == 50.0 and js["n_images"] == 2


def test_report_row_count_for_19_landmarks():
    rep = report_from_distances({k: [float(k)] for k in range(1, 20)}, K=19, n_images=1)
    assert len(rep.rows()) == 20


def test_report_missing_group():
    with pytest.raises(ContractError):
        report_from_distances({1: [1.0]}, K=2, n_images=1)


def test_per_landmark_report_aggregate_cross_check(rng, tmp_path):
    K, n = 3, 12
    transforms = [ResizeTransform(*rng.uniform(0.5, 4, 2)) for _ in range(n)]
    preds = {k: [LandmarkPoint(*rng.uniform(0, 64, 2)) for _ in range(n)] for k in range(1, K + 1)}
    gts = {k: [LandmarkPoint(*rng.uniform(0, 200, 2), Frame.ORIGINAL) for _ in range(n)] for k in range(1, K + 1)}
    rep = per_landmark_report(preds, gts, transforms, 0.1, K)
    flat = [d for k in range(1, K + 1) for p, g, t in zip(preds[k], gts[k], transforms)
            for d in radial_errors([p], [g], t, 0.1)]
    assert rep.aggregate["mre_mm"] == pytest.approx(compute_mre(flat), abs=1e-12)
    assert [rep.aggregate[c] for c in ("sdr2", "sdr2_5", "sdr3", "sdr4")] == compute_sdr(flat)
    rep.write(tmp_path)
    assert (tmp_path / "report.csv").is_file() and (tmp_path / "report.json").is_file()
    with pytest.raises(ContractError):
        per_landmark_report({1: preds[1]}, gts, transforms, 0.1, K)
