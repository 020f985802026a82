"""Constant-velocity, learned (POVL) and ground-truth trajectory predictors.

All three return :class:`PredictedTrajectory` objects of identical shape so the
planner cannot tell them apart.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .features import ObservationWindow
from .geometry import ExtrapolationError, ReferencePath
from .scene import DT, RoadMap, Track
from .transformer import GaussianTrajectory, POVLModel

T_PRED = 25


class PredictionError(ValueError):
    pass


class Source(str, enum.Enum):
    CV = "cv"
    POVL = "povl"
    GT = "gt"


@dataclass
class PredictedTrajectory:
    positions: np.ndarray       # (T_PRED, 2) Cartesian, steps 1..T_PRED after the current frame
    covariance: np.ndarray      # (T_PRED, 2, 2)
    source: Source
    vehicle_id: int = -1
    frame: int = -1

    def __post_init__(self):
        if self.positions.shape != (T_PRED, 2):
            raise PredictionError(f"expected {T_PRED} predicted steps, got {self.positions.shape}")


def _identity_cov():
    return np.broadcast_to(np.eye(2), (T_PRED, 2, 2)).copy()


def predict_cv(track: Track, frame: int) -> PredictedTrajectory:
    i = track.index(frame)
    k = np.arange(1, T_PRED + 1)[:, None] * DT
    pos = track.pos[i] + k * track.vel[i]
    return PredictedTrajectory(pos, _identity_cov(), Source.CV, track.vehicle_id, frame)


def predict_gt(track: Track, frame: int) -> PredictedTrajectory:
    i = track.index(frame)
    if i + T_PRED >= len(track):
        raise PredictionError(f"track {track.vehicle_id} has only {len(track) - i - 1} future "
                              f"frames after {frame}, {T_PRED} needed")
    return PredictedTrajectory(track.pos[i + 1:i + 1 + T_PRED].copy(), _identity_cov(),
                               Source.GT, track.vehicle_id, frame)


def cv_frenet_prior(path: ReferencePath, s0, d0, v_long, v_lat, steps: int = T_PRED,
                    dt: float = DT) -> np.ndarray:
    """Per-step Frenet displacements (N, steps, 2) of a Cartesian constant-velocity rollout.

    On a curved path a straight-line vehicle does not keep a constant Frenet
    velocity; this is the exact Frenet image of the CV baseline.
    """
    s0, d0 = np.atleast_1d(np.asarray(s0, float)), np.atleast_1d(np.asarray(d0, float))
    lo, hi = path.s_range
    p0 = path.evaluate(np.clip(s0, lo, hi), d0)
    t = path.tangent(s0)
    nrm = np.stack([-t[:, 1], t[:, 0]], -1)
    v = np.asarray(v_long, float)[:, None] * t + np.asarray(v_lat, float)[:, None] * nrm
    k = np.arange(1, steps + 1)[None, :, None] * dt
    pts = p0[:, None] + k * v[:, None]
    s, d, _ = path.project(pts.reshape(-1, 2))
    sd = np.stack([s, d], -1).reshape(len(s0), steps, 2)
    start = np.stack([s0, d0], -1)[:, None]
    return np.diff(np.concatenate([start, sd], axis=1), axis=1)


def window_prior(windows: Sequence[ObservationWindow], road: RoadMap) -> np.ndarray:
    out = np.zeros((len(windows), T_PRED, 2))
    for i, w in enumerate(windows):
        o = w.origin
        out[i] = cv_frenet_prior(road.paths[o.associated_path], o.s, o.d,
                                 [w.features[-1, 1]], [w.features[-1, 2]])[0]
    return out


def reconstruct(g: GaussianTrajectory, window: ObservationWindow, path: ReferencePath,
                clamp: bool = False) -> PredictedTrajectory:
    """Cumulative Frenet displacements from the window origin, back to Cartesian."""
    o = window.origin
    s = o.s + np.cumsum(g.mu[:, 0])
    d = o.d + np.cumsum(g.mu[:, 1])
    lo, hi = path.s_range
    if clamp:
        s = np.clip(s, lo, hi)
    elif s.min() < lo or s.max() > hi:
        raise ExtrapolationError(f"predicted s leaves the {path.segment_kind.value} path")
    pos = path.evaluate(s, d)
    # rotate the accumulated Frenet covariance into the local Cartesian axes
    cov_f = np.cumsum(g.covariance(), axis=0)
    t = path.tangent(s)
    R = np.stack([np.stack([t[:, 0], -t[:, 1]], -1), np.stack([t[:, 1], t[:, 0]], -1)], -2)
    cov = R @ cov_f @ np.swapaxes(R, -1, -2)
    return PredictedTrajectory(pos, cov, Source.POVL, window.vehicle_id, window.frame)


def predict_povl_batch(windows: Sequence[ObservationWindow], model: POVLModel, road: RoadMap,
                       clamp: bool = False) -> list[PredictedTrajectory]:
    if not windows:
        return []
    feats = np.stack([w.features for w in windows])
    mask = np.stack([w.mask for w in windows])
    gs = model.predict_gaussian(feats, mask, window_prior(windows, road))
    return [reconstruct(g, w, road.paths[w.origin.associated_path], clamp)
            for g, w in zip(gs, windows)]


def predict_povl(window: ObservationWindow, model: POVLModel, path: ReferencePath,
                 clamp: bool = False) -> PredictedTrajectory:
    o = window.origin
    prior = cv_frenet_prior(path, o.s, o.d, [window.features[-1, 1]], [window.features[-1, 2]])
    (g,) = model.predict_gaussian(window.features[None], window.mask[None], prior)
    return reconstruct(g, window, path, clamp)
