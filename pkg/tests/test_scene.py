import io

import numpy as np
import pytest

from povl.scene import (
    CSV_COLUMNS,
    DT,
    IngestionError,
    LaneType,
    RoadMap,
    Scenario,
    ScenarioError,
    Track,
    extract_merging_scenarios,
    ingest_tracks,
    load_scenarios,
    read_tracks,
    save_scenario,
    tracks_to_csv,
)
from povl.synthetic import (
    EGO_ID,
    GenerationError,
    GeneratorConfig,
    MergeGeometry,
    _slip_y,
    assign_lanes,
    generate_synthetic,
    merge_map,
)


def csv_text(n_frames=250, vid=7, start=0, skip=None):
    lines = [",".join(CSV_COLUMNS)]
    for f in range(start, start + n_frames):
        if f == skip:
            continue
        lines.append(f"{f},{vid},{0.8 * f},1.0,20.0,0.0,0.0,0.0,2,1.8,4.5")
    return "\n".join(lines) + "\n"


def test_downsample_25_to_5():
    tracks = ingest_tracks(io.StringIO(csv_text(250)), fps_in=25)
    tr = tracks[7]
    assert len(tr) == 50
    np.testing.assert_array_equal(tr.frames, np.arange(50))
    # kinematics come straight from the file (frame 5 -> x = 4.0)
    assert tr.pos[1, 0] == pytest.approx(4.0)
    assert np.all(tr.vel[:, 0] == 20.0)


def test_5fps_identity():
    tr = read_tracks(io.StringIO(csv_text(40)), fps_in=5)[7]
    assert len(tr) == 40
    np.testing.assert_allclose(tr.pos[:, 0], 0.8 * np.arange(40))


def test_gap_is_named():
    with pytest.raises(IngestionError, match="gap between frames 11 and 13"):
        read_tracks(io.StringIO(csv_text(30, skip=12)), fps_in=5)


def test_nan_names_row():
    text = csv_text(5).replace("1.6,1.0,20.0", "1.6,nan,20.0")
    with pytest.raises(IngestionError, match="row 4"):
        read_tracks(io.StringIO(text), fps_in=5)


def test_schema_mismatch():
    with pytest.raises(IngestionError, match="header"):
        read_tracks(io.StringIO("frame,id,x\n0,1,2\n"), fps_in=5)


def test_non_monotone_frames():
    text = ",".join(CSV_COLUMNS) + "\n" + "\n".join(
        f"{f},1,0,0,0,0,0,0,2,1.8,4.5" for f in (0, 1, 1)) + "\n"
    with pytest.raises(IngestionError, match="not increasing"):
        read_tracks(io.StringIO(text), fps_in=5)


def test_csv_round_trip_byte_stable():
    scn = generate_synthetic(GeneratorConfig(density="sparse"), seed=3)
    text = tracks_to_csv(scn.tracks)
    again = tracks_to_csv(read_tracks(io.StringIO(text), fps_in=5))
    assert text == again


def test_map_json_round_trip():
    road = merge_map()
    back = RoadMap.from_json(road.to_json())
    assert back.to_json() == road.to_json()
    assert back.lane(1).type is LaneType.MERGE
    assert back.neighbor(2, "right", -50.0).id == 1


def merging_track(vid, x0, road, speed=20.0, n=120, t_lc=8.0, g=MergeGeometry()):
    t = np.arange(n) * DT
    x = x0 + speed * t
    tau = np.clip((t - t_lc) / 3.0, 0, 1)
    y = (1 - tau ** 3 * (10 - 15 * tau + 6 * tau ** 2)) * _slip_y(x, g, 3.5)
    pos = np.stack([x, y], 1)
    vel = np.gradient(pos, DT, axis=0)
    return Track(vid, np.arange(n), pos, vel, np.zeros_like(pos), assign_lanes(road, pos))


def mainline_track(vid, x0, y, road, speed=24.0, n=120):
    t = np.arange(n) * DT
    pos = np.stack([x0 + speed * t, np.full(n, y)], 1)
    vel = np.tile([speed, 0.0], (n, 1))
    return Track(vid, np.arange(n), pos, vel, np.zeros_like(pos), assign_lanes(road, pos))


def test_extract_three_merging_of_eight():
    road = merge_map()
    tracks = {}
    for vid, x0 in zip((1, 2, 3), (-330.0, -300.0, -270.0)):
        tracks[vid] = merging_track(vid, x0, road)
    for k, vid in enumerate(range(10, 15)):
        tracks[vid] = mainline_track(vid, -500.0 + 60 * k, 3.5 * (k % 2), road)
    scns = extract_merging_scenarios(tracks, road)
    assert {s.ego_id for s in scns} == {1, 2, 3}
    for s in scns:
        s.validate()
        assert s.target_lane == 2
        assert s.ego.lane_id[s.ego.index(s.start_frame)] == 1


def test_vehicle_staying_on_slip_road_excluded():
    road = merge_map()
    tr = merging_track(1, -330.0, road, n=60, t_lc=100.0)
    assert set(tr.lane_id) == {1}
    assert extract_merging_scenarios({1: tr}, road) == []


def test_start_frames_leave_room_for_duration():
    road = merge_map()
    # short track: merges but ends soon after
    tr = merging_track(1, -260.0, road, n=50, t_lc=4.0)
    scns = extract_merging_scenarios({1: tr}, road, every=1)
    assert scns
    assert all(s.start_frame + 25 <= tr.last_frame for s in scns)
    long = extract_merging_scenarios({1: merging_track(1, -260.0, road, n=200, t_lc=4.0)},
                                     road, every=1)
    assert len(long) > len(scns)


def test_scenario_validate_rejects_short_ego():
    road = merge_map()
    tr = merging_track(1, -260.0, road, n=30)
    with pytest.raises(ScenarioError):
        Scenario(road, {1: tr}, 1, 10, 5.0, "x", 2).validate()


def test_generator_deterministic():
    a = generate_synthetic(GeneratorConfig(density="sparse"), seed=42)
    b = generate_synthetic(GeneratorConfig(density="sparse"), seed=42)
    assert tracks_to_csv(a.tracks) == tracks_to_csv(b.tracks)
    assert a.map.to_json() == b.map.to_json()
    assert a.start_frame == b.start_frame
    c = generate_synthetic(GeneratorConfig(density="sparse"), seed=43)
    assert tracks_to_csv(c.tracks) != tracks_to_csv(a.tracks)


def test_cv_profile_future_is_cv_extrapolation():
    scn = generate_synthetic(GeneratorConfig(profile="cv"), seed=1)
    for tr in scn.tracks.values():
        for i in range(0, len(tr) - 25, 7):
            k = np.arange(1, 26)[:, None]
            cv = tr.pos[i] + tr.vel[i] * k * DT
            np.testing.assert_allclose(tr.pos[i + 1:i + 26], cv, atol=1e-9)


def test_dense_respects_spawn_gap():
    cfg = GeneratorConfig(density="dense")
    scn = generate_synthetic(cfg, seed=2)
    others = scn.others()
    frames = range(min(t.first_frame for t in others), max(t.last_frame for t in others) + 1)
    worst = np.inf
    for f in frames:
        rows = [(t.lane_id[t.index(f)], t.pos[t.index(f), 0], t.length)
                for t in others if t.has_frame(f)]
        for lane in {r[0] for r in rows}:
            xs = sorted((x, l) for ln, x, l in rows if ln == lane)
            for (x1, l1), (x2, l2) in zip(xs, xs[1:]):
                worst = min(worst, x2 - x1 - 0.5 * (l1 + l2))
    assert worst >= cfg.min_spawn_gap


def test_infeasible_density_raises():
    with pytest.raises(GenerationError):
        generate_synthetic(GeneratorConfig(headway=(10.0, 12.0)), seed=0)


def test_generated_scenario_shape():
    scn = generate_synthetic(GeneratorConfig(density="medium"), seed=5)
    assert scn.ego_id == EGO_ID
    assert scn.duration == 5.0
    ego = scn.ego
    assert ego.lane_id[0] == 1 and ego.lane_id[-1] == 2


def test_scenario_files_round_trip(tmp_path):
    scn = generate_synthetic(GeneratorConfig(density="sparse"), seed=8)
    save_scenario(scn, tmp_path)
    (back,) = load_scenarios(tmp_path)
    assert back.scenario_id == scn.scenario_id
    assert back.start_frame == scn.start_frame
    assert tracks_to_csv(back.tracks) == tracks_to_csv(scn.tracks)
