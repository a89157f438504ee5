from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oneshot_landmarks.datamodel import (Frame, ImageRecord, LandmarkPoint, PseudoLabelStore, ResizeTransform,
                                         clamp_to_croppable, croppable_bounds, in_croppable_region, map_coords)
from oneshot_landmarks.errors import ContractError


def test_identity_transform_maps_to_original():
    p = map_coords(LandmarkPoint(100, 100, Frame.RESIZED), ResizeTransform(1.0, 1.0), "to_original")
    assert (p.x, p.y, p.frame) == (100, 100, Frame.ORIGINAL)


def test_isbi_geometry_to_original():
    t = ResizeTransform.between((2400, 1935), (384, 384))
    assert t.sx == 1935 / 384 and t.sy == 2400 / 384
    p = map_coords(LandmarkPoint(192, 192, Frame.RESIZED), t, "to_original")
    assert p.x == pytest.approx(967.5, abs=1e-12)
    assert p.y == pytest.approx(1200.0, abs=1e-12)


def test_round_trip_example():
    t = ResizeTransform(5.0390625, 6.25)
    p = LandmarkPoint(37.25, 301.5, Frame.RESIZED)
    q = map_coords(map_coords(p, t, "to_original"), t, "to_resized")
    assert abs(q.x - p.x) < 1e-9 and abs(q.y - p.y) < 1e-9 and q.frame == Frame.RESIZED


def test_round_trip_1000_random_points(rng):
    for _ in range(1000):
        t = ResizeTransform(*rng.uniform(0.01, 20.0, size=2))
        p = LandmarkPoint(*rng.uniform(0, 4000, size=2), Frame.ORIGINAL)
        q = map_coords(map_coords(p, t, "to_resized"), t, "to_original")
        assert math.hypot(q.x - p.x, q.y - p.y) < 1e-9


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(0, 1e4), st.floats(0, 1e4))
def test_round_trip_property(sx, sy, x, y):
    t = ResizeTransform(sx, sy)
    q = map_coords(map_coords(LandmarkPoint(x, y), t, "to_original"), t, "to_resized")
    assert abs(q.x - x) < 1e-9 and abs(q.y - y) < 1e-9


def test_frame_mismatch_is_rejected():
    t = ResizeTransform(2.0, 2.0)
    with pytest.raises(ContractError):
        map_coords(LandmarkPoint(1, 1, Frame.ORIGINAL), t, "to_original")
    with pytest.raises(ContractError):
        map_coords(LandmarkPoint(1, 1, Frame.PATCH), t, "to_resized")
    with pytest.raises(ContractError):
        LandmarkPoint(0, 0, Frame.ORIGINAL).distance(LandmarkPoint(0, 0, Frame.RESIZED))


@pytest.mark.parametrize("sx,sy", [(0, 1), (1, -2), (float("nan"), 1)])
def test_transform_requires_positive_scales(sx, sy):
    with pytest.raises(ContractError):
        ResizeTransform(sx, sy)


def test_image_record_is_immutable_and_counts_landmarks():
    a = np.zeros((8, 8), np.float32)
    gt = (LandmarkPoint(1, 2, Frame.ORIGINAL), LandmarkPoint(3, 4, Frame.ORIGINAL))
    rec = ImageRecord("a", a, a.copy(), ResizeTransform(1, 1), gt)
    assert rec.num_landmarks == 2 and rec.input_size == 8
    assert rec.gt_resized(2) == LandmarkPoint(3, 4, Frame.RESIZED)
    with pytest.raises(ValueError):
        rec.resized[0, 0] = 1.0
    with pytest.raises(ContractError):
        ImageRecord("b", a.copy(), a.copy(), ResizeTransform(1, 1), (LandmarkPoint(1, 1, Frame.RESIZED),))


def test_croppable_bounds_are_inclusive():
    assert croppable_bounds(384, 192) == (96, 288)
    assert in_croppable_region(LandmarkPoint(96, 288), 384, 192)
    assert not in_croppable_region(LandmarkPoint(95.5, 200), 384, 192)
    assert clamp_to_croppable(LandmarkPoint(0, 400), 384, 192) == LandmarkPoint(96, 288)


@settings(max_examples=300)
@given(st.floats(-50, 450), st.floats(-50, 450))
def test_store_rejects_writes_outside_croppable_region(x, y):
    store = PseudoLabelStore(384, 192)
    p = LandmarkPoint(x, y, Frame.RESIZED)
    if in_croppable_region(p, 384, 192):
        store.set("img", 1, p)
        assert store.get("img", 1) == p
    else:
        with pytest.raises(ContractError):
            store.set("img", 1, p)
        assert len(store) == 0


def test_store_completeness_and_frame_checks():
    store = PseudoLabelStore(64, 32)
    store.set("a", 1, LandmarkPoint(20, 20))
    assert store.is_complete(["a"], 1) and not store.is_complete(["a", "b"], 1)
    with pytest.raises(ContractError):
        store.set("a", 1, LandmarkPoint(20, 20, Frame.ORIGINAL))
    with pytest.raises(ContractError):
        store.get("b", 1)
    c = store.copy()
    c.set("b", 1, LandmarkPoint(30, 30))
    assert len(store) == 1 and len(c) == 2
