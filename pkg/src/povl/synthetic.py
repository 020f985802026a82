"""Desk-scale synthetic highway-merge recordings.

The map is a straight main carriageway along +x with a single-lane slip road
that curves in from the right, runs parallel as an acceleration lane and
tapers into the rightmost main lane.  Mainline traffic is simulated per lane
with the intelligent driver model (IDM) so platoons never overlap; vehicles
pick one of three profiles:

* ``constant``     keep the spawn speed,
* ``sinusoidal``   constant speed with a small lateral weave inside the lane,
* ``gap_closing``  desire a higher speed and close up on the leader.

Random braking events give the longitudinal dynamics something to predict.
One merging vehicle starts on the slip road and changes into the main
carriageway inside the merge area.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import OutOfRoadError, SegmentKind, associate_sequence, make_path_pair
from .scene import (
    DT,
    GenerationError,
    Lane,
    LaneType,
    RoadMap,
    Scenario,
    Track,
    extract_merging_scenarios,
)

DENSITY_PRESETS = {
    # headway range (centre to centre, m), mean speed (m/s)
    "sparse": ((70.0, 110.0), 28.0),
    "medium": ((34.0, 55.0), 22.0),
    "dense": ((20.0, 32.0), 16.0),
}

EGO_ID = 1
FINE_DT = 0.05


@dataclass
class GeneratorConfig:
    n_main_lanes: int = 2
    lane_width: float = 3.5
    density: str = "medium"
    headway: Optional[tuple[float, float]] = None
    mean_speed: Optional[float] = None
    speed_spread: float = 2.0
    min_spawn_gap: float = 8.0
    duration: float = 24.0
    profile: str = "mixed"  # "mixed" or "cv"
    profile_weights: tuple[float, float, float] = (0.4, 0.3, 0.3)
    brake_prob: float = 0.35
    brake_drop: tuple[float, float] = (3.0, 7.0)
    weave_amplitude: tuple[float, float] = (0.15, 0.5)
    weave_period: tuple[float, float] = (5.0, 10.0)
    vel_noise: float = 0.2
    acc_noise: float = 0.3
    spawn_x: tuple[float, float] = (-700.0, 250.0)
    lc_duration: tuple[float, float] = (3.0, 5.0)
    scenario_duration: float = 5.0

    def resolve(self):
        if self.density not in DENSITY_PRESETS and self.headway is None:
            raise GenerationError(f"unknown density {self.density!r}")
        headway, speed = DENSITY_PRESETS.get(self.density, (None, 22.0))
        return (tuple(self.headway) if self.headway is not None else headway,
                self.mean_speed if self.mean_speed is not None else speed)


@dataclass(frozen=True)
class MergeGeometry:
    x_start: float = -900.0
    x_end: float = 900.0
    x_ramp: float = -380.0
    x_merge: float = -200.0   # acceleration lane becomes adjacent to the main road
    x_taper: float = -20.0    # taper starts
    x_join: float = 40.0      # slip centreline meets the main centreline (origin)
    ramp_offset: float = -25.0
    spacing: float = 1.0


def _slip_y(x, g: MergeGeometry, w: float):
    x = np.asarray(x, dtype=float)
    ramp = -w + (g.ramp_offset + w) * 0.5 * (1 + np.cos(np.pi * (x - g.x_ramp) / (g.x_merge - g.x_ramp)))
    taper = -w * 0.5 * (1 + np.cos(np.pi * (x - g.x_taper) / (g.x_join - g.x_taper)))
    return np.select([x < g.x_merge, x < g.x_taper, x < g.x_join], [ramp, -w, taper], 0.0)


def merge_map(n_main_lanes: int = 2, lane_width: float = 3.5, speeds=None,
              geometry: MergeGeometry = MergeGeometry()) -> RoadMap:
    g, w, n = geometry, lane_width, n_main_lanes
    if n < 1:
        raise GenerationError("need at least one main lane")
    speeds = speeds or [25.0] * (n + 1)
    xm = np.arange(g.x_start, g.x_end + 0.5 * g.spacing, g.spacing)
    main_pts = np.stack([xm, np.zeros_like(xm)], axis=1)
    xs = np.arange(g.x_ramp, g.x_end + 0.5 * g.spacing, g.spacing)
    slip_pts = np.stack([xs, _slip_y(xs, g, w)], axis=1)
    half = 0.5 * w
    paths = make_path_pair(slip_pts, main_pts, (-half, half), (-half, (n - 1) * w + half))
    slip, main = paths[SegmentKind.SLIP_ROAD], paths[SegmentKind.MAIN_CARRIAGEWAY]
    s_merge_slip = float(slip.project(np.array([[g.x_merge, -w]]))[0][0])
    s_merge_main = g.x_merge - g.x_join

    lanes = {1: Lane(1, SegmentKind.SLIP_ROAD, 0.0, w, LaneType.MERGE, slip.s_range[0], 0.0,
                     left=(2, s_merge_slip, 0.0), nominal_speed=speeds[0])}
    for i in range(n):
        lid = 2 + i
        lanes[lid] = Lane(
            lid, SegmentKind.MAIN_CARRIAGEWAY, i * w, w,
            LaneType.EXPECT_MERGING if i == 0 else LaneType.NORMAL,
            main.s_range[0], main.s_range[1],
            left=(lid + 1, -math.inf, math.inf) if i < n - 1 else None,
            right=(1, s_merge_main, 0.0) if i == 0 else (lid - 1, -math.inf, math.inf),
            nominal_speed=speeds[i + 1])

    ramp = xs <= g.x_merge
    ramp_s = slip.project(slip_pts[ramp])[0]
    slip_left = slip.evaluate(ramp_s, np.full_like(ramp_s, half))
    to_join = xs <= g.x_join
    join_s = slip.project(slip_pts[to_join])[0]
    slip_right = slip.evaluate(join_s, np.full_like(join_s, -half))
    down = xm > g.x_join
    right_edge = np.vstack([slip_right, np.stack([xm[down], np.full(down.sum(), -half)], 1)])
    up = xm <= g.x_merge
    boundaries = [
        np.stack([xm[up], np.full(up.sum(), -half)], 1),
        slip_left,
        right_edge,
        np.stack([xm, np.full_like(xm, (n - 1) * w + half)], 1),
    ]
    markings = [np.stack([xm, np.full_like(xm, (i + 0.5) * w)], 1) for i in range(n - 1)]
    xk = np.arange(g.x_merge, g.x_taper + 0.5 * g.spacing, g.spacing)
    markings.append(np.stack([xk, np.full_like(xk, -half)], 1))
    return RoadMap(paths, lanes, boundaries, markings, target_lane=2)


def assign_lanes(road: RoadMap, pos: np.ndarray) -> np.ndarray:
    """Lane id per sample via path association (with hysteresis) and nearest centre."""
    paths = road.path_list
    projs = [p.project(pos) for p in paths]
    kinds = associate_sequence(pos, paths, projections=projs)
    proj = {p.segment_kind: pr for p, pr in zip(paths, projs)}
    out = np.empty(len(pos), dtype=np.int64)
    for i, kind in enumerate(kinds):
        s, d = float(proj[kind][0][i]), float(proj[kind][1][i])
        cands = [l for l in road.lanes.values() if l.path is kind and l.covers(s)]
        if not cands:
            cands = [l for l in road.lanes.values() if l.path is kind]
        out[i] = min(cands, key=lambda l: (abs(d - l.center), l.id)).id
    return out


def _idm_platoon(x0, v0, desired, lengths, events, t_end, rng):
    """Integrate one lane (ordered downstream first) with IDM at FINE_DT."""
    a_max, b, T, s0, delta = 1.5, 2.0, 1.1, 2.0, 4.0
    n_steps = int(round(t_end / FINE_DT)) + 1
    n = len(x0)
    X = np.empty((n_steps, n))
    V = np.empty((n_steps, n))
    A = np.empty((n_steps, n))
    x, v = np.array(x0, float), np.array(v0, float)
    for k in range(n_steps):
        t = k * FINE_DT
        vd = desired.copy()
        for j, (tb, dur, drop) in events.items():
            if tb <= t < tb + dur:
                vd[j] = max(desired[j] - drop, 2.0)
        acc = a_max * (1 - (v / vd) ** delta)
        gap = x[:-1] - x[1:] - 0.5 * (lengths[:-1] + lengths[1:])
        gap = np.maximum(gap, 0.1)
        dv = v[1:] - v[:-1]
        s_star = s0 + np.maximum(0.0, v[1:] * T + v[1:] * dv / (2 * math.sqrt(a_max * b)))
        acc[1:] -= a_max * (s_star / gap) ** 2
        acc = np.maximum(acc, -9.0)
        X[k], V[k], A[k] = x, v, acc
        v_new = np.maximum(v + acc * FINE_DT, 0.0)
        x = x + 0.5 * (v + v_new) * FINE_DT
        v = v_new
    return X, V, A


def _sample(arr, stride):
    return arr[::stride]


def generate_synthetic(config: GeneratorConfig = GeneratorConfig(), seed: int = 0,
                       scenario_id: Optional[str] = None,
                       geometry: MergeGeometry = MergeGeometry()) -> Scenario:
    rng = np.random.default_rng(seed)
    headway, speed = config.resolve()
    cv_only = config.profile == "cv"
    n, w = config.n_main_lanes, config.lane_width
    lane_speeds = [speed] + [speed + 1.5 * i for i in range(n)]
    road = merge_map(n, w, lane_speeds, geometry)
    max_len = 5.0
    if headway[0] - max_len < config.min_spawn_gap:
        raise GenerationError(
            f"headway {headway[0]:.1f} m leaves less than the {config.min_spawn_gap:.1f} m spawn gap")
    stride = int(round(DT / FINE_DT))
    n_fine = int(round(config.duration / FINE_DT)) + 1
    t_fine = np.arange(n_fine) * FINE_DT
    tracks: dict[int, Track] = {}
    next_id = EGO_ID + 1
    vel_noise = 0.0 if cv_only else config.vel_noise
    acc_noise = 0.0 if cv_only else config.acc_noise

    def finish(vid, pos, vel, acc, length, width):
        pos, vel, acc = (_sample(a, stride) for a in (pos, vel, acc))
        inside = (pos[:, 0] > geometry.x_start + 5) & (pos[:, 0] < geometry.x_end - 5)
        idx = np.nonzero(inside)[0]
        if len(idx) < 2:
            return
        lo, hi = idx[0], idx[-1] + 1
        if not np.all(inside[lo:hi]):
            hi = lo + int(np.argmin(inside[lo:hi]))
        pos, vel, acc = pos[lo:hi], vel[lo:hi], acc[lo:hi]
        try:
            lanes = assign_lanes(road, pos)
        except OutOfRoadError:
            return
        vel = vel + rng.normal(0.0, 1.0, vel.shape) * vel_noise
        acc = acc + rng.normal(0.0, 1.0, acc.shape) * acc_noise
        tracks[vid] = Track(vid, np.arange(lo, hi), pos, vel, acc, lanes, length, width)

    for lane_idx in range(n):
        y_c = lane_idx * w
        xs = [config.spawn_x[1] - rng.uniform(0, headway[1])]
        while True:
            nxt = xs[-1] - rng.uniform(*headway)
            if nxt < config.spawn_x[0]:
                break
            xs.append(nxt)
        m = len(xs)
        lengths = rng.uniform(4.0, max_len, m)
        widths = rng.uniform(1.7, 2.0, m)
        gaps = -np.diff(xs) - 0.5 * (lengths[:-1] + lengths[1:])
        if m > 1 and gaps.min() < config.min_spawn_gap:
            raise GenerationError("spawned vehicles overlap the safety gap")
        base = lane_speeds[lane_idx + 1]
        if cv_only:
            v0 = np.full(m, base)
            X = np.asarray(xs)[None, :] + t_fine[:, None] * v0[None, :]
            V = np.broadcast_to(v0, X.shape)
            A = np.zeros_like(X)
            profiles = ["constant"] * m
        else:
            v0 = base + rng.uniform(-config.speed_spread, config.speed_spread, m)
            profiles = list(rng.choice(["constant", "sinusoidal", "gap_closing"], m,
                                       p=np.asarray(config.profile_weights) / sum(config.profile_weights)))
            desired = v0.copy()
            for j, p in enumerate(profiles):
                if p == "gap_closing":
                    desired[j] += rng.uniform(2.0, 4.0)
            events = {}
            for j in range(m):
                if rng.uniform() < config.brake_prob:
                    events[j] = (rng.uniform(0.0, config.duration - 3.0), rng.uniform(2.0, 4.0),
                                 rng.uniform(*config.brake_drop))
            X, V, A = _idm_platoon(np.asarray(xs), v0, desired, lengths, events,
                                   config.duration, rng)
        for j in range(m):
            y = np.full(n_fine, y_c)
            vy = np.zeros(n_fine)
            ay = np.zeros(n_fine)
            if profiles[j] == "sinusoidal":
                amp = rng.uniform(*config.weave_amplitude)
                om = 2 * math.pi / rng.uniform(*config.weave_period)
                ph = rng.uniform(0, 2 * math.pi)
                y = y_c + amp * np.sin(om * t_fine + ph)
                vy = amp * om * np.cos(om * t_fine + ph)
                ay = -amp * om * om * np.sin(om * t_fine + ph)
            pos = np.stack([X[:, j], y], 1)
            vel = np.stack([V[:, j], vy], 1)
            acc = np.stack([A[:, j], ay], 1)
            finish(next_id, pos, vel, acc, float(lengths[j]), float(widths[j]))
            next_id += 1

    ego_len, ego_w = 4.6, 1.85
    v_e = lane_speeds[1] + (0.0 if cv_only else rng.uniform(-1.0, 1.0))
    if cv_only:
        p0 = np.array([geometry.x_merge + 1.0, -w])
        v_lat = w / 12.0
        pos = p0[None, :] + t_fine[:, None] * np.array([v_e, v_lat])[None, :]
        vel = np.broadcast_to([v_e, v_lat], pos.shape).copy()
        acc = np.zeros_like(pos)
    else:
        # Ego reaches the merge area after ~4-7 s, changes lane inside it.
        t_max = min(7.0, (geometry.x_merge - geometry.x_ramp - 10.0) / v_e)
        t_reach = rng.uniform(min(4.0, t_max), t_max)
        x_fine = geometry.x_merge + v_e * (t_fine - t_reach)
        lc_dur = rng.uniform(*config.lc_duration)
        t_area = (geometry.x_taper - geometry.x_merge) / v_e
        t_lc = t_reach + rng.uniform(0.3, 0.6) * max(t_area - lc_dur, 0.5)
        tau = np.clip((t_fine - t_lc) / lc_dur, 0.0, 1.0)
        blend = tau ** 3 * (10 - 15 * tau + 6 * tau ** 2)
        y_fine = (1 - blend) * _slip_y(x_fine, geometry, w)
        pos = np.stack([x_fine, y_fine], 1)
        vel = np.gradient(pos, FINE_DT, axis=0)
        acc = np.gradient(vel, FINE_DT, axis=0)
    finish(EGO_ID, pos, vel, acc, ego_len, ego_w)
    if EGO_ID not in tracks:
        raise GenerationError("merging vehicle left the map")

    sid = scenario_id or f"seed_{seed:04d}"
    cands = extract_merging_scenarios({EGO_ID: tracks[EGO_ID]}, road,
                                      duration=config.scenario_duration, prefix=sid)
    # Others need recorded futures for the whole run plus one prediction horizon.
    need = 2 * int(round(config.scenario_duration / DT))
    cands = [c for c in cands if c.start_frame + need <= int(round(config.duration / DT))]
    if not cands:
        raise GenerationError("merging vehicle has no admissible start frame")
    pick = cands[int(rng.integers(len(cands)))]
    return Scenario(road, tracks, EGO_ID, pick.start_frame, config.scenario_duration, sid,
                    pick.target_lane).validate()
