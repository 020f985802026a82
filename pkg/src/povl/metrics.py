"""Prediction accuracy and closed-loop planning metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

BUCKETS = (3.0, 5.0, 7.0, 10.0, 20.0, 30.0, 50.0)
TTC_RADIUS = 2.0
TTC_FLOOR = 0.1  # s; caps a single contribution at 1 / TTC_FLOOR
ITTC_SCALE = 100.0


class UndefinedMetricError(ValueError):
    pass


def rmse(predictions, ground_truths, horizon_step: Optional[int] = None) -> float:
    """Root mean square 2-D error.

    Arrays are (N, 2) or (N, T, 2).  With ``horizon_step`` (1-based) only that
    step of each sample is used, otherwise all steps are pooled.
    """
    p = np.asarray(predictions, float)
    g = np.asarray(ground_truths, float)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if horizon_step is not None:
        if p.ndim != 3:
            raise ValueError("horizon_step needs (N, T, 2) arrays")
        p, g = p[:, horizon_step - 1], g[:, horizon_step - 1]
    if p.size == 0:
        raise UndefinedMetricError("RMSE of an empty sample set")
    err = ((p - g) ** 2).sum(axis=-1)
    return float(np.sqrt(err.mean()))


def time_to_collision(rel_pos, rel_vel, radius: float = TTC_RADIUS) -> np.ndarray:
    """Smallest t > 0 with |p + v t| = radius; inf when the pair never closes to it.

    ``rel_pos``/``rel_vel`` are other minus ego, shape (..., 2).  Pairs already
    inside the radius get 0.
    """
    p = np.asarray(rel_pos, float)
    v = np.asarray(rel_vel, float)
    a = (v * v).sum(-1)
    b = (p * v).sum(-1)
    c = (p * p).sum(-1) - radius * radius
    disc = b * b - a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (-b - np.sqrt(np.maximum(disc, 0.0))) / a
    closing = (b < 0) & (disc >= 0) & (a > 0)
    out = np.where(closing & (t > 0), t, np.inf)
    return np.where(c <= 0, 0.0, out)


def inverse_ttc(rel_pos, rel_vel, radius: float = TTC_RADIUS, floor: float = TTC_FLOOR):
    ttc = time_to_collision(rel_pos, rel_vel, radius)
    return 1.0 / np.maximum(ttc, floor)


def ittc(ego_pos, ego_vel, other_pos, other_vel, present=None, radius: float = TTC_RADIUS,
         floor: float = TTC_FLOOR) -> float:
    """Mean over (step, vehicle) pairs of max(0, 1/TTC), in 1/s.

    ego arrays (T, 2); other arrays (T, n, 2); ``present`` (T, n) selects pairs.
    """
    ep, ev = np.asarray(ego_pos, float), np.asarray(ego_vel, float)
    op, ov = np.asarray(other_pos, float), np.asarray(other_vel, float)
    inv = inverse_ttc(op - ep[:, None], ov - ev[:, None], radius, floor)
    if present is None:
        present = np.ones(inv.shape, bool)
    if not present.any():
        return 0.0
    return float(inv[present].mean())


def jerk_mean(velocities, dt: float = 0.2) -> float:
    """Mean magnitude of the second difference of velocity samples (m/s³)."""
    v = np.asarray(velocities, float)
    if len(v) < 3:
        raise UndefinedMetricError("jerk needs at least 3 samples")
    j = np.diff(v, n=2, axis=0) / (dt * dt)
    return float(np.mean(np.abs(j) if j.ndim == 1 else np.linalg.norm(j, axis=-1)))


def force_mean(forces) -> float:
    """Mean |F_u| in kN."""
    f = np.asarray(forces, float)
    if f.size == 0:
        raise UndefinedMetricError("force of an empty plan")
    return float(np.mean(np.abs(f)) / 1000.0)


def box_gap(ego_pos, ego_size, other_pos, other_size) -> np.ndarray:
    """Euclidean gap between axis-aligned vehicle boxes (0 when they overlap).

    sizes are (length, width); positions broadcast.
    """
    d = np.abs(np.asarray(other_pos, float) - np.asarray(ego_pos, float))
    half = 0.5 * (np.asarray(ego_size, float) + np.asarray(other_size, float))
    g = np.maximum(d - half, 0.0)
    return np.linalg.norm(g, axis=-1)


def bucketize(distances, thresholds: Sequence[float] = BUCKETS, mode: str = "nearest"):
    """Bucket membership per step from distances (T, n) with NaN for absent vehicles.

    A step is in bucket "<D" when the nearest (or farthest) present vehicle is
    closer than D.  Returns {D: bool array (T,)}.
    """
    d = np.asarray(distances, float)
    if d.ndim == 1:
        d = d[:, None]
    if mode not in ("nearest", "farthest"):
        raise ValueError(f"unknown bucket mode {mode!r}")
    any_present = ~np.all(np.isnan(d), axis=1)
    filled = np.where(np.isnan(d), np.inf if mode == "nearest" else -np.inf, d)
    ref = filled.min(axis=1) if mode == "nearest" else filled.max(axis=1)
    return {D: any_present & (ref < D) for D in thresholds}


def relative_improvement(baseline: float, candidate: float) -> float:
    """(baseline - candidate) / baseline, e.g. (CV - POVL) / CV."""
    if baseline == 0:
        return 0.0 if candidate == 0 else -np.inf
    return float((baseline - candidate) / baseline)


@dataclass
class PlanningSample:
    """Per-step closed-loop record for one scenario."""

    scenario_id: str
    predictor: str
    inv_ttc: list            # per step: array of 1/TTC over present vehicles
    jerk: np.ndarray         # per step |jerk| (NaN where undefined)
    force: np.ndarray        # per step |F_u| in N
    distance: np.ndarray     # per step bucketing distance: nearest (or farthest) box gap, inf if none


def planning_table(samples: Sequence[PlanningSample], thresholds=BUCKETS) -> dict:
    """Bucketed means {D: {"ittc", "jerk", "force", "n_steps"}} with iTTC ×100, force kN."""
    out = {}
    for D in thresholds:
        inv, jerk, force, n = [], [], [], 0
        for s in samples:
            sel = np.asarray(s.distance) < D
            n += int(sel.sum())
            for k in np.nonzero(sel)[0]:
                inv.extend(np.asarray(s.inv_ttc[k]).tolist())
            j = np.asarray(s.jerk)[sel]
            jerk.extend(j[np.isfinite(j)].tolist())
            force.extend(np.asarray(s.force)[sel].tolist())
        out[D] = {
            "ittc": ITTC_SCALE * float(np.mean(inv)) if inv else float("nan"),
            "jerk": float(np.mean(jerk)) if jerk else float("nan"),
            "force": float(np.mean(force)) / 1000.0 if force else float("nan"),
            "n_steps": n,
        }
    return out
