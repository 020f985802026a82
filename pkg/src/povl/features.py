"""Per-frame 28-feature vectors and padded observation windows.

Layout of one feature row::

    0..4    TV motion: lateral position in lane, v_long, v_lat, a_lat, a_long
    5..24   ten surrounding-vehicle slots, each (lateral gap, longitudinal gap)
    25..27  environment: lane width, left lane type, right lane type

All gaps are centre to centre, measured in the Frenet frame of the TV's
reference path.  Empty slots hold a ghost vehicle at (0, +/-perception range).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .geometry import FrenetState, SegmentKind
from .scene import LaneType, RoadMap, Track

T_MAX = 15
T_MIN = 2
N_FEATURES = 28
PERCEPTION_RANGE = 100.0
CLOSE_BAND = 1.5  # lane widths

SLOT_NAMES = (
    "preceding", "following",
    "right_close_preceding", "right_close_following",
    "right_far_preceding", "right_far_following",
    "left_close_preceding", "left_close_following",
    "left_far_preceding", "left_far_following",
)
MOTION = slice(0, 5)
SLOTS = slice(5, 25)
ENV = slice(25, 28)


class FeatureError(ValueError):
    pass


class InsufficientObservationError(FeatureError):
    pass


def ghost_slots(perception_range: float = PERCEPTION_RANGE) -> np.ndarray:
    g = np.zeros((10, 2))
    g[0::2, 1] = perception_range
    g[1::2, 1] = -perception_range
    return g


@dataclass(frozen=True)
class LaneContext:
    lane_width: float
    left_lane_type: LaneType
    right_lane_type: LaneType

    def as_array(self) -> np.ndarray:
        return np.array([self.lane_width, int(self.left_lane_type), int(self.right_lane_type)], float)


def lane_context(road: RoadMap, lane_id: int, s: float) -> LaneContext:
    try:
        lane = road.lane(lane_id)
    except KeyError as e:
        raise FeatureError(str(e)) from None
    left = road.neighbor(lane.id, "left", s)
    right = road.neighbor(lane.id, "right", s)
    return LaneContext(lane.width,
                       left.type if left else LaneType.NO_LANE,
                       right.type if right else LaneType.NO_LANE)


def assign_slots(ds, dd, same_lane, lane_width: float, has_left: bool, has_right: bool,
                 perception_range: float = PERCEPTION_RANGE) -> tuple[np.ndarray, np.ndarray]:
    """Fill the ten slots from neighbour gaps (Δs, Δd) relative to the TV.

    Returns the (10, 2) slot matrix of (lateral, longitudinal) gaps and the
    index of the neighbour held by each slot (-1 for a ghost).
    """
    ds = np.asarray(ds, float)
    dd = np.asarray(dd, float)
    same = np.asarray(same_lane, bool)
    ahead = ds > 0
    close = np.abs(dd) < CLOSE_BAND * lane_width
    left = ~same & (dd > 0)
    right = ~same & (dd <= 0)
    groups = [same, right & close, right & ~close, left & close, left & ~close]
    allowed = [True, has_right, has_right, has_left, has_left]
    in_range = np.abs(ds) <= perception_range
    slots = ghost_slots(perception_range)
    owner = np.full(10, -1)
    for g, (grp, ok) in enumerate(zip(groups, allowed)):
        if not ok:
            continue
        for k, side in enumerate((ahead, ~ahead)):
            cand = np.nonzero(grp & side & in_range)[0]
            if len(cand):
                j = cand[np.argmin(np.abs(ds[cand]))]
                owner[2 * g + k] = j
                slots[2 * g + k] = dd[j], ds[j]
    return slots, owner


def _frame_features(road: RoadMap, ids, pos, vel, acc, lanes,
                    perception_range: float = PERCEPTION_RANGE, targets=None) -> np.ndarray:
    """Feature rows for the vehicles ``targets`` (indices, default all) of one frame.

    Every vehicle present acts as a potential neighbour.
    """
    n = len(ids)
    targets = range(n) if targets is None else targets
    out = np.zeros((n, N_FEATURES))
    proj = {k: p.project(pos)[:2] for k, p in road.paths.items()}
    for i in targets:
        try:
            lane = road.lane(lanes[i])
        except KeyError as e:
            raise FeatureError(str(e)) from None
        path = road.paths[lane.path]
        s_all, d_all = proj[lane.path]
        s, d = float(s_all[i]), float(d_all[i])
        t = path.tangent(s)
        nrm = np.array([-t[1], t[0]])
        out[i, 0] = d - lane.center
        out[i, 1] = vel[i] @ t
        out[i, 2] = vel[i] @ nrm
        out[i, 3] = acc[i] @ nrm
        out[i, 4] = acc[i] @ t
        ctx = lane_context(road, lane.id, s)
        others = np.arange(n) != i
        slots, _ = assign_slots(s_all[others] - s, d_all[others] - d, lanes[others] == lanes[i],
                                lane.width, ctx.left_lane_type != LaneType.NO_LANE,
                                ctx.right_lane_type != LaneType.NO_LANE, perception_range)
        out[i, SLOTS] = slots.ravel()
        out[i, ENV] = ctx.as_array()
    return out


def build_feature_vector(tracks: dict[int, Track], road: RoadMap, vehicle_id: int, frame: int,
                         perception_range: float = PERCEPTION_RANGE) -> np.ndarray:
    ids = [v for v in sorted(tracks) if tracks[v].has_frame(frame)]
    if vehicle_id not in ids:
        raise FeatureError(f"vehicle {vehicle_id} is not present at frame {frame}")
    rows = _frame_features(road, *_gather(tracks, ids, frame), perception_range)
    return rows[ids.index(vehicle_id)]


def _gather(tracks, ids, frame):
    idx = [tracks[v].index(frame) for v in ids]
    pos = np.array([tracks[v].pos[i] for v, i in zip(ids, idx)]).reshape(-1, 2)
    vel = np.array([tracks[v].vel[i] for v, i in zip(ids, idx)]).reshape(-1, 2)
    acc = np.array([tracks[v].acc[i] for v, i in zip(ids, idx)]).reshape(-1, 2)
    lanes = np.array([tracks[v].lane_id[i] for v, i in zip(ids, idx)], dtype=np.int64)
    return np.asarray(ids), pos, vel, acc, lanes


@dataclass
class ObservationWindow:
    features: np.ndarray        # (T_MAX, 28), zero rows where mask is False
    mask: np.ndarray            # (T_MAX,) bool, valid rows form a suffix
    t_obs: int
    origin: FrenetState         # TV position at the current frame
    vehicle_id: int = -1
    frame: int = -1

    def __post_init__(self):
        if not T_MIN <= self.t_obs <= T_MAX:
            raise InsufficientObservationError(f"t_obs={self.t_obs} outside [{T_MIN}, {T_MAX}]")
        expected = np.arange(T_MAX) >= T_MAX - self.t_obs
        if self.features.shape != (T_MAX, N_FEATURES) or not np.array_equal(self.mask, expected):
            raise FeatureError("window shape or mask inconsistent with t_obs")


class FeatureTable:
    """Feature rows for every (vehicle, frame) of a recording, computed once."""

    def __init__(self, tracks: dict[int, Track], road: RoadMap,
                 perception_range: float = PERCEPTION_RANGE, frames: Optional[Iterable[int]] = None):
        self.tracks = tracks
        self.road = road
        self.rows: dict[int, np.ndarray] = {v: np.zeros((len(t), N_FEATURES)) for v, t in tracks.items()}
        self._done = {v: np.zeros(len(t), bool) for v, t in tracks.items()}
        if frames is None:
            lo = min(t.first_frame for t in tracks.values())
            hi = max(t.last_frame for t in tracks.values())
            frames = range(lo, hi + 1)
        self.perception_range = perception_range
        for f in frames:
            self._fill(f)

    def _fill(self, frame):
        ids = [v for v in sorted(self.tracks) if self.tracks[v].has_frame(frame)]
        if not ids:
            return
        rows = _frame_features(self.road, *_gather(self.tracks, ids, frame), self.perception_range)
        for v, r in zip(ids, rows):
            i = self.tracks[v].index(frame)
            self.rows[v][i] = r
            self._done[v][i] = True

    def refresh(self, frame: int):
        """Recompute one frame, e.g. after a track was overwritten there."""
        self._fill(frame)

    def history(self, vehicle_id: int, frame: int) -> int:
        """Number of frames available up to and including ``frame``."""
        return self.tracks[vehicle_id].index(frame) + 1

    def window(self, vehicle_id: int, frame: int, t_obs: int) -> ObservationWindow:
        return build_window(self, vehicle_id, frame, t_obs)


def frenet_origin(track: Track, road: RoadMap, frame: int) -> FrenetState:
    i = track.index(frame)
    lane = road.lane(track.lane_id[i])
    path = road.paths[lane.path]
    s, d, ext = path.project(track.pos[i:i + 1])
    return FrenetState(float(s[0]), float(d[0]), lane.path, bool(ext[0]))


def build_window(table: FeatureTable, vehicle_id: int, frame: int, t_obs: int) -> ObservationWindow:
    if t_obs < T_MIN:
        raise InsufficientObservationError(
            f"t_obs={t_obs}: at least {T_MIN} observed steps are needed")
    if t_obs > T_MAX:
        raise FeatureError(f"t_obs={t_obs} exceeds T_max={T_MAX}")
    track = table.tracks[vehicle_id]
    i = track.index(frame)
    if i + 1 < t_obs:
        raise InsufficientObservationError(
            f"vehicle {vehicle_id} has only {i + 1} frames of history at frame {frame}")
    lo = i + 1 - t_obs
    if not table._done[vehicle_id][lo:i + 1].all():
        for f in range(track.first_frame + lo, frame + 1):
            table._fill(f)
    feats = np.zeros((T_MAX, N_FEATURES))
    feats[T_MAX - t_obs:] = table.rows[vehicle_id][lo:i + 1]
    mask = np.arange(T_MAX) >= T_MAX - t_obs
    return ObservationWindow(feats, mask, t_obs, frenet_origin(track, table.road, frame),
                             vehicle_id, frame)
