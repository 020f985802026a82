import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from povl.features import (
    ENV,
    MOTION,
    N_FEATURES,
    PERCEPTION_RANGE,
    SLOTS,
    T_MAX,
    FeatureError,
    FeatureTable,
    InsufficientObservationError,
    assign_slots,
    build_feature_vector,
    build_window,
    ghost_slots,
)
from povl.scene import DT, LaneType, Track
from povl.synthetic import GeneratorConfig, generate_synthetic, merge_map


def cv_track(vid, x0, y, lane, n=30, vx=20.0, vy=0.0):
    t = np.arange(n) * DT
    pos = np.stack([x0 + vx * t, y + vy * t], 1)
    vel = np.tile([vx, vy], (n, 1))
    return Track(vid, np.arange(n), pos, vel, np.zeros_like(pos), np.full(n, lane))


@pytest.fixture(scope="module")
def road():
    return merge_map(n_main_lanes=2, lane_width=3.5)


def test_alone_on_road(road):
    # lane 3 is the left main lane: no left neighbour, lane 2 (expect merging) on the right
    tracks = {5: cv_track(5, 300.0, 3.5, 3, vx=25.0, vy=0.3)}
    f = build_feature_vector(tracks, road, 5, 0)
    assert f.shape == (N_FEATURES,)
    np.testing.assert_allclose(f[MOTION], [0.0, 25.0, 0.3, 0.0, 0.0], atol=1e-12)
    np.testing.assert_array_equal(f[SLOTS].reshape(10, 2), ghost_slots())
    np.testing.assert_array_equal(f[ENV], [3.5, LaneType.NO_LANE, LaneType.EXPECT_MERGING])


def test_vehicle_directly_ahead(road):
    tracks = {5: cv_track(5, 300.0, 0.0, 2), 6: cv_track(6, 320.0, 0.0, 2)}
    f = build_feature_vector(tracks, road, 5, 0)
    np.testing.assert_allclose(f[5:7], [0.0, 20.0], atol=1e-12)
    np.testing.assert_allclose(f[7:9], [0.0, -PERCEPTION_RANGE])


def test_mainline_tv_sees_merge_lane_on_right(road):
    # x = -100 lies inside the merge area where lane 1 runs alongside lane 2
    tracks = {5: cv_track(5, -100.0, 0.0, 2, n=3), 6: cv_track(6, -95.0, -3.5, 1, n=3)}
    f = build_feature_vector(tracks, road, 5, 0)
    assert f[27] == LaneType.MERGE
    assert f[26] == LaneType.NORMAL
    np.testing.assert_allclose(f[9:11], [-3.5, 5.0], atol=1e-9)  # right close preceding


def test_merging_tv_left_type(road):
    tracks = {6: cv_track(6, -100.0, -3.5, 1, n=3)}
    f = build_feature_vector(tracks, road, 6, 0)
    assert f[26] == LaneType.EXPECT_MERGING
    assert f[27] == LaneType.NO_LANE


def test_nearest_wins():
    slots, owner = assign_slots([15.0, 40.0], [0.0, 0.0], [True, True], 3.5, True, True)
    assert owner[0] == 0
    np.testing.assert_allclose(slots[0], [0.0, 15.0])


def test_no_left_lane_ghosts_left_slots():
    ds = np.array([10.0, -10.0, 20.0])
    dd = np.array([3.5, 3.4, 7.0])
    slots, owner = assign_slots(ds, dd, [False] * 3, 3.5, has_left=False, has_right=True)
    np.testing.assert_array_equal(owner[6:], -1)
    np.testing.assert_array_equal(slots[6:], ghost_slots()[6:])
    _, owner = assign_slots(ds, dd, [False] * 3, 3.5, has_left=True, has_right=True)
    assert list(owner[6:]) == [0, 1, 2, -1]


def test_out_of_range_is_ghost():
    slots, owner = assign_slots([101.0], [0.0], [True], 3.5, True, True)
    assert owner[0] == -1
    np.testing.assert_array_equal(slots, ghost_slots())


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.floats(-150, 150), st.floats(-12, 12), st.booleans()),
                min_size=0, max_size=25),
       st.booleans(), st.booleans())
def test_slots_partial_injection(cands, has_left, has_right):
    ds = np.array([c[0] for c in cands])
    dd = np.array([c[1] for c in cands])
    same = np.array([c[2] for c in cands], bool)
    slots, owner = assign_slots(ds, dd, same, 3.5, has_left, has_right)
    used = owner[owner >= 0]
    assert len(used) == len(set(used.tolist()))
    ghost = owner < 0
    assert np.all(np.abs(slots[ghost, 1]) >= PERCEPTION_RANGE)
    assert np.all(np.abs(slots[~ghost, 1]) <= PERCEPTION_RANGE)


def test_unknown_lane_raises(road):
    tracks = {5: cv_track(5, 300.0, 0.0, 99, n=3)}
    with pytest.raises(FeatureError):
        build_feature_vector(tracks, road, 5, 0)


@pytest.fixture(scope="module")
def table():
    scn = generate_synthetic(GeneratorConfig(density="sparse"), seed=4)
    return FeatureTable(scn.tracks, scn.map), scn


def test_window_full(table):
    tab, scn = table
    f = scn.start_frame
    w = build_window(tab, scn.ego_id, f, 15)
    assert w.features.shape == (T_MAX, N_FEATURES)
    assert w.mask.all()
    np.testing.assert_array_equal(w.features[-1], build_feature_vector(scn.tracks, scn.map,
                                                                       scn.ego_id, f))


def test_window_two_steps(table):
    tab, scn = table
    w = build_window(tab, scn.ego_id, scn.start_frame, 2)
    assert w.mask.sum() == 2 and w.mask[-2:].all()
    assert np.all(w.features[:13] == 0.0)
    full = build_window(tab, scn.ego_id, scn.start_frame, 15)
    np.testing.assert_array_equal(w.features[-2:], full.features[-2:])


def test_window_one_step_rejected(table):
    tab, scn = table
    with pytest.raises(InsufficientObservationError):
        build_window(tab, scn.ego_id, scn.start_frame, 1)


def test_window_needs_history(table):
    tab, scn = table
    tr = scn.ego
    with pytest.raises(InsufficientObservationError):
        build_window(tab, scn.ego_id, tr.first_frame + 3, 5)


def test_lazy_table_matches_eager(table):
    tab, scn = table
    lazy = FeatureTable(scn.tracks, scn.map, frames=[])
    a = build_window(lazy, scn.ego_id, scn.start_frame, 7)
    b = build_window(tab, scn.ego_id, scn.start_frame, 7)
    np.testing.assert_array_equal(a.features, b.features)
    assert a.origin == b.origin
