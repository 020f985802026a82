"""Closed-loop simulation: the planner drives the ego through a recorded scenario.

Other vehicles replay their recordings (they do not react).  The ego's
recorded future is replaced by the simulated states, so it shows up as a
surrounding vehicle in everyone else's features.  At every step each vehicle
within perception range is predicted, the step-i prediction means become the
obstacles of the planner's i-th horizon step, and the first planned control
is applied through the nonlinear model.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .dynamics import IPSI, IU, IX, IY, EgoState
from .features import PERCEPTION_RANGE, T_MAX, T_MIN, FeatureTable
from .geometry import OutOfRoadError
from .metrics import TTC_FLOOR, TTC_RADIUS, PlanningSample, box_gap, inverse_ttc
from .mpc import MPCState, PlannerConfig, Reference, receding_horizon_step
from .potential import Environment
from .predictor import T_PRED, PredictedTrajectory, PredictionError, Source, predict_cv, \
    predict_gt, predict_povl_batch
from .scene import DT, Scenario, Track
from .synthetic import assign_lanes


@dataclass(frozen=True)
class SimulationConfig:
    predictor: str = "cv"                       # cv | povl | gt
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    perception_range: float = PERCEPTION_RANGE  # m, centre distance for predicting a vehicle
    ttc_radius: float = TTC_RADIUS
    ttc_floor: float = TTC_FLOOR
    bucket_mode: str = "nearest"                # which vehicle's gap buckets a step

    def __post_init__(self):
        Source(self.predictor)  # raises on unknown names
        if self.bucket_mode not in ("nearest", "farthest"):
            raise ValueError(f"unknown bucket mode {self.bucket_mode!r}")


@dataclass
class SimulationResult:
    scenario_id: str
    predictor: str
    frames: np.ndarray          # (n + 1,) frame of each ego state
    states: np.ndarray          # (n + 1, 6) simulated ego states
    controls: np.ndarray        # (n, 2) applied controls
    plan_cost: np.ndarray       # (n,) optimal cost of each solved plan
    status: list                # (n,) solver status
    sample: PlanningSample
    n_predicted: np.ndarray     # (n,) vehicles fed to the planner per step

    def rows(self):
        """Per-step CSV rows: time, state, applied control, plan cost, metrics."""
        out = []
        s = self.sample
        for k in range(len(self.controls)):
            x = self.states[k + 1]
            inv = np.asarray(s.inv_ttc[k])
            out.append({
                "scenario": self.scenario_id, "predictor": self.predictor,
                "step": k + 1, "t": round((k + 1) * DT, 6),
                "X": x[0], "u": x[1], "Y": x[2], "v": x[3], "psi": x[4], "r": x[5],
                "F_u": self.controls[k, 0], "delta_f": self.controls[k, 1],
                "plan_cost": self.plan_cost[k], "status": self.status[k],
                "gap": s.distance[k], "inv_ttc_max": float(inv.max()) if inv.size else 0.0,
                "jerk": s.jerk[k], "n_predicted": int(self.n_predicted[k]),
            })
        return out


def initial_state(track: Track, frame: int) -> np.ndarray:
    i = track.index(frame)
    vx, vy = track.vel[i]
    return EgoState(float(track.pos[i, 0]), float(math.hypot(vx, vy)), float(track.pos[i, 1]),
                    0.0, float(math.atan2(vy, vx)), 0.0).array()


def _global_velocity(x):
    c, s = math.cos(x[IPSI]), math.sin(x[IPSI])
    return np.array([x[IU] * c - x[3] * s, x[IU] * s + x[3] * c])


class _EgoTrack:
    """A copy of the ego track whose frames after the start get overwritten."""

    def __init__(self, scn: Scenario):
        src = scn.ego
        self.track = Track(src.vehicle_id, src.frames.copy(), src.pos.copy(), src.vel.copy(),
                           src.acc.copy(), src.lane_id.copy(), src.length, src.width)
        self.start = scn.start_frame
        self.road = scn.map

    def write(self, frame: int, x: np.ndarray, prev_vel: np.ndarray):
        t = self.track
        i = t.index(frame)
        vel = _global_velocity(x)
        t.pos[i] = x[[IX, IY]]
        t.vel[i] = vel
        t.acc[i] = (vel - prev_vel) / DT
        lo = t.index(self.start)
        try:
            t.lane_id[i] = assign_lanes(self.road, t.pos[lo:i + 1])[-1]
        except OutOfRoadError:
            t.lane_id[i] = t.lane_id[i - 1]


def _predict(scn: Scenario, table: FeatureTable, frame: int, ego_pos, cfg: SimulationConfig, model):
    """Predictions for every other vehicle present at ``frame`` and within range."""
    near = []
    for tr in scn.others():
        if tr.has_frame(frame):
            i = tr.index(frame)
            if np.hypot(*(tr.pos[i] - ego_pos)) <= cfg.perception_range:
                near.append(tr)
    preds: list[Optional[PredictedTrajectory]] = [None] * len(near)
    kind = Source(cfg.predictor)
    windows, slots = [], []
    for j, tr in enumerate(near):
        if kind is Source.GT:
            try:
                preds[j] = predict_gt(tr, frame)
            except PredictionError:
                preds[j] = predict_cv(tr, frame)  # recording ends inside the horizon
        elif kind is Source.POVL:
            t_obs = min(table.history(tr.vehicle_id, frame), T_MAX)
            if t_obs >= T_MIN:
                windows.append(table.window(tr.vehicle_id, frame, t_obs))
                slots.append(j)
            else:
                preds[j] = predict_cv(tr, frame)
        else:
            preds[j] = predict_cv(tr, frame)
    if windows:
        if model is None:
            raise ValueError("the povl predictor needs a trained model")
        for j, p in zip(slots, predict_povl_batch(windows, model, scn.map, clamp=True)):
            preds[j] = p
    return preds


def simulate(scn: Scenario, cfg: SimulationConfig = SimulationConfig(), model=None) -> SimulationResult:
    scn.validate()
    pcfg = cfg.planner
    road = scn.map
    env = Environment.from_map(road)
    ref = Reference.for_lane(road, scn.target())
    ego = _EgoTrack(scn)
    tracks = dict(scn.tracks)
    tracks[scn.ego_id] = ego.track
    scn_sim = replace(scn, tracks=tracks)
    start, n = scn.start_frame, scn.n_steps
    table = FeatureTable(tracks, road, cfg.perception_range,
                         frames=range(max(start - T_MAX + 1, 0), start + 1))

    x = initial_state(ego.track, start)
    i0 = ego.track.index(start)
    heading = np.array([math.cos(x[IPSI]), math.sin(x[IPSI])])
    state = MPCState(x, np.array([pcfg.vehicle.mass * float(ego.track.acc[i0] @ heading), 0.0]))
    state.prev_control = np.clip(state.prev_control, -pcfg.bounds, pcfg.bounds)

    states, controls, costs, status, counts = [x], [], [], [], []
    inv_ttc, bucket_dist = [], []
    ego_size = (ego.track.length, ego.track.width)
    for k in range(n):
        frame = start + k
        preds = _predict(scn_sim, table, frame, state.x[[IX, IY]], cfg, model)
        obs = np.stack([p.positions for p in preds], 1) if preds else np.zeros((T_PRED, 0, 2))
        applied, plan, state = receding_horizon_step(state, obs, ref, pcfg, env)
        prev_vel = _global_velocity(states[-1])
        ego.write(frame + 1, state.x, prev_vel)
        table.refresh(frame + 1)
        states.append(state.x)
        controls.append(applied)
        costs.append(plan.cost)
        status.append(plan.status)
        counts.append(len(preds))

        # metrics against the recorded positions of everyone present at the new frame
        ep, ev = state.x[[IX, IY]], _global_velocity(state.x)
        pos, vel, size = [], [], []
        for tr in scn.others():
            if tr.has_frame(frame + 1):
                i = tr.index(frame + 1)
                if np.hypot(*(tr.pos[i] - ep)) <= cfg.perception_range:
                    pos.append(tr.pos[i])
                    vel.append(tr.vel[i])
                    size.append((tr.length, tr.width))
        if pos:
            pos, vel = np.array(pos), np.array(vel)
            inv_ttc.append(inverse_ttc(pos - ep, vel - ev, cfg.ttc_radius, cfg.ttc_floor))
            gaps = box_gap(ep, ego_size, pos, np.array(size))
            bucket_dist.append(float(gaps.min() if cfg.bucket_mode == "nearest" else gaps.max()))
        else:
            inv_ttc.append(np.zeros(0))
            bucket_dist.append(math.inf)

    states = np.array(states)
    vel = np.array([_global_velocity(s) for s in states])
    jerk = np.full(n, np.nan)
    if n >= 2:
        # step k sits at state k + 1; its jerk needs the states on either side
        j = np.linalg.norm(np.diff(vel, n=2, axis=0), axis=1) / (DT * DT)
        jerk[:-1] = j
    controls = np.array(controls)
    sample = PlanningSample(scn.scenario_id, cfg.predictor, inv_ttc, jerk,
                            np.abs(controls[:, 0]), np.array(bucket_dist))
    return SimulationResult(scn.scenario_id, cfg.predictor, np.arange(start, start + n + 1),
                            states, controls, np.array(costs), status, sample, np.array(counts))


def plan_once(scn: Scenario, cfg: SimulationConfig = SimulationConfig(), model=None):
    """Open-loop plan at the scenario start: (EgoPlan, predictions)."""
    scn.validate()
    road = scn.map
    start = scn.start_frame
    table = FeatureTable(scn.tracks, road, cfg.perception_range,
                         frames=range(max(start - T_MAX + 1, 0), start + 1))
    x = initial_state(scn.ego, start)
    preds = _predict(scn, table, start, x[[IX, IY]], cfg, model)
    obs = np.stack([p.positions for p in preds], 1) if preds else np.zeros((T_PRED, 0, 2))
    plan = receding_horizon_step(MPCState(x), obs, Reference.for_lane(road, scn.target()),
                                 cfg.planner, Environment.from_map(road))[1]
    return plan, preds


def _run_one(args):
    scn, cfg, model = args
    return simulate(scn, cfg, model)


def simulate_many(scenarios: Sequence[Scenario], cfg: SimulationConfig = SimulationConfig(),
                  model=None, workers: int = 1) -> list[SimulationResult]:
    """Simulate scenarios, returned in scenario-id order whatever the worker count."""
    order = sorted(scenarios, key=lambda s: s.scenario_id)
    jobs = [(s, cfg, model) for s in order]
    if workers <= 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))
