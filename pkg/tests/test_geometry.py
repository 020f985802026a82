import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from povl.geometry import (
    ExtrapolationError,
    ExtrapolationWarning,
    FrenetState,
    GeometryError,
    OutOfRoadError,
    ReferencePath,
    SegmentKind,
    associate_path,
    make_path_pair,
    polyline_intersection,
    to_cartesian,
    to_frenet,
)

MAIN = SegmentKind.MAIN_CARRIAGEWAY
SLIP = SegmentKind.SLIP_ROAD


def straight(x0=-100.0, x1=100.0, spacing=0.1):
    n = int(round((x1 - x0) / spacing)) + 1
    pts = np.stack([np.linspace(x0, x1, n), np.zeros(n)], axis=1)
    return ReferencePath.from_points(pts, MAIN, half_width=5.0).with_origin(-x0)


def quarter_circle(radius=100.0, n=1571):
    th = np.linspace(-math.pi / 2, 0.0, n)
    pts = np.stack([radius * np.cos(th), radius + radius * np.sin(th)], axis=1)
    return ReferencePath.from_points(pts, MAIN, half_width=5.0)


def dense_oracle(radius, point, n=10_000):
    """Nearest vertex on a very dense sampling of the true arc."""
    th = np.linspace(-math.pi / 2, 0.0, n)
    arc = np.stack([radius * np.cos(th), radius + radius * np.sin(th)], axis=1)
    i = int(np.argmin(np.linalg.norm(arc - point, axis=1)))
    s = radius * (th[i] + math.pi / 2)
    tangent = np.array([-math.sin(th[i]), math.cos(th[i])])
    off = point - arc[i]
    d = math.copysign(np.linalg.norm(off), tangent[0] * off[1] - tangent[1] * off[0])
    return s, d


def test_straight_axis_aligned():
    f = to_frenet([10.0, 2.0], straight())
    assert f.s == pytest.approx(10.0, abs=1e-12)
    assert f.d == pytest.approx(2.0, abs=1e-12)
    assert f.associated_path is MAIN


def test_point_on_path():
    f = to_frenet([37.5, 0.0], straight())
    assert f.s == pytest.approx(37.5, abs=1e-12)
    assert f.d == pytest.approx(0.0, abs=1e-12)


def test_upstream_s_negative():
    assert to_frenet([-40.0, -1.0], straight()).s == pytest.approx(-40.0)


def test_quarter_circle_against_dense_oracle():
    path = quarter_circle()
    ang = -math.pi / 4
    p = np.array([101.0 * math.cos(ang), 100.0 + 101.0 * math.sin(ang)])
    s_ref, d_ref = dense_oracle(100.0, p)
    f = to_frenet(p, path)
    assert s_ref == pytest.approx(math.pi * 100 / 4, abs=0.01)
    assert d_ref == pytest.approx(-1.0, abs=1e-4)
    assert f.s == pytest.approx(s_ref, abs=0.02)
    assert f.d == pytest.approx(d_ref, abs=1e-3)


def test_to_cartesian_straight():
    p = to_cartesian(FrenetState(10.0, 0.0, MAIN), straight())
    np.testing.assert_allclose(p, [10.0, 0.0], atol=1e-12)


def test_to_cartesian_quarter_circle():
    ang = -math.pi / 4
    target = np.array([101.0 * math.cos(ang), 100.0 + 101.0 * math.sin(ang)])
    p = to_cartesian(FrenetState(math.pi * 100 / 4, -1.0, MAIN), quarter_circle())
    assert np.linalg.norm(p - target) < 1e-3


def test_to_cartesian_out_of_range():
    with pytest.raises(ExtrapolationError):
        to_cartesian(FrenetState(150.0, 0.0, MAIN), straight())


def test_to_frenet_beyond_end_flags():
    with pytest.warns(ExtrapolationWarning):
        f = to_frenet([130.0, 1.0], straight())
    assert f.extrapolated
    assert f.s == pytest.approx(100.0)


@pytest.mark.parametrize("make", [straight, quarter_circle])
def test_round_trip_random(make):
    path = make()
    rng = np.random.default_rng(0)
    lo, hi = path.s_range
    s = rng.uniform(lo + 1, hi - 1, 1000)
    d = rng.uniform(-4.9, 4.9, 1000)
    pts = path.evaluate(s, d)
    s2, d2, ext = path.project(pts)
    assert not ext.any()
    back = path.evaluate(s2, d2)
    assert np.max(np.linalg.norm(back - pts, axis=1)) < 1e-6


def test_sign_convention_and_monotonicity():
    path = quarter_circle()
    s = np.linspace(1, path.length - 1, 200)
    left = path.evaluate(s, np.full_like(s, 0.7))
    s_l, d_l, _ = path.project(left)
    assert np.all(d_l > 0)
    assert np.all(np.diff(s_l) >= 0)


@settings(max_examples=60, deadline=None)
@given(st.floats(1.0, 150.0), st.floats(-4.5, 4.5))
def test_round_trip_property(s, d):
    path = quarter_circle()
    p = path.evaluate(np.array([s]), np.array([d]))
    f = to_frenet(p[0], path)
    assert np.linalg.norm(to_cartesian(f, path) - p[0]) < 1e-6


def test_rejects_duplicate_points():
    with pytest.raises(GeometryError):
        ReferencePath.from_points([[0, 0], [0, 0], [1, 0]], MAIN)


def merge_pair():
    main = np.stack([np.arange(-300.0, 200.5, 0.5), np.zeros(1001)], axis=1)
    xs = np.arange(-300.0, 0.5, 0.5)
    ys = np.where(xs < -60, -3.5, -3.5 + 3.5 * (xs + 60) / 60)
    slip = np.stack([xs, ys], axis=1)
    return make_path_pair(slip, main, slip_corridor=(-1.75, 1.75), main_corridor=(-1.75, 5.25))


def test_origin_is_crossing_point():
    paths = merge_pair()
    np.testing.assert_allclose(paths[MAIN].evaluate(np.array([0.0]))[0], [0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(paths[SLIP].evaluate(np.array([0.0]))[0], [0.0, 0.0], atol=1e-9)


def test_intersection_non_crossing_midpoint():
    a = np.array([[0.0, 0.0], [10.0, 0.0]])
    b = np.array([[0.0, 2.0], [10.0, 2.0]])
    assert polyline_intersection(a, b) is None
    paths = make_path_pair(a, b)
    np.testing.assert_allclose(paths[SLIP].evaluate(np.array([0.0]))[0], [0.0, 0.0])


def test_association_rules():
    paths = list(merge_pair().values())
    assert associate_path([-100.0, 0.0], paths) is MAIN
    assert associate_path([-100.0, -3.5], paths) is SLIP
    assert associate_path([-100.0, -1.75], paths) is MAIN
    with pytest.raises(OutOfRoadError):
        associate_path([-100.0, 40.0], paths)


def test_association_hysteresis():
    paths = list(merge_pair().values())
    # Merging vehicle just past the marking keeps its slip-road association.
    assert associate_path([-100.0, -1.5], paths) is MAIN
    assert associate_path([-100.0, -1.5], paths, previous=SLIP) is SLIP
    assert associate_path([-100.0, -1.0], paths, previous=SLIP) is MAIN
