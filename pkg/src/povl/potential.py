"""Repulsive potential fields: obstacle vehicles, road boundaries and lane markings.

Obstacle fields are elliptical in the global X/Y axes, boundary fields are
quadratic inside an influence distance, and lane markings carry a low Gaussian
ridge that the planner may cross.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class PotentialConfig:
    a_o: float = 10.0
    X_c: float = 8.0
    Y_c: float = 1.5
    c_x: int = 2
    c_y: int = 2
    a_r: float = 5.0
    D_r: float = 1.5
    a_l: float = 1.0
    b_l: float = 2.0
    eps_o: float = 1e-2

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"potential parameter {k} must be positive, got {v}")
        for k in ("c_x", "c_y"):
            v = getattr(self, k)
            if int(v) != v or int(v) % 2:
                raise ValueError(f"{k} must be an even integer, got {v}")
        if not (self.a_l < self.a_o and self.a_l < self.a_r):
            raise ValueError("lane-marking magnitude a_l must stay below a_o and a_r")

    def scaled(self, obstacles: float = 1.0, boundaries: float = 1.0, lanes: float = 1.0):
        """Gains multiplied by the given factors, skipping validation (zero allowed)."""
        c = object.__new__(PotentialConfig)
        for k, v in asdict(self).items():
            object.__setattr__(c, k, v)
        object.__setattr__(c, "a_o", self.a_o * obstacles)
        object.__setattr__(c, "a_r", self.a_r * boundaries)
        object.__setattr__(c, "a_l", self.a_l * lanes)
        return c


DEFAULT_POTENTIAL = PotentialConfig()


def v_obstacle(p, obs, cfg: PotentialConfig = DEFAULT_POTENTIAL):
    p, obs = np.asarray(p, float), np.asarray(obs, float)
    dx = (p[..., 0] - obs[..., 0]) / cfg.X_c
    dy = (p[..., 1] - obs[..., 1]) / cfg.Y_c
    return cfg.a_o / (dx ** int(cfg.c_x) + dy ** int(cfg.c_y) + cfg.eps_o)


def grad_v_obstacle(p, obs, cfg: PotentialConfig = DEFAULT_POTENTIAL):
    """d v_obstacle / d p, shape (..., 2)."""
    p, obs = np.asarray(p, float), np.asarray(obs, float)
    cx, cy = int(cfg.c_x), int(cfg.c_y)
    dx = (p[..., 0] - obs[..., 0]) / cfg.X_c
    dy = (p[..., 1] - obs[..., 1]) / cfg.Y_c
    den = dx ** cx + dy ** cy + cfg.eps_o
    k = -cfg.a_o / (den * den)
    return np.stack([k * cx * dx ** (cx - 1) / cfg.X_c, k * cy * dy ** (cy - 1) / cfg.Y_c], -1)


def v_boundary(d_r, cfg: PotentialConfig = DEFAULT_POTENTIAL):
    d = np.asarray(d_r, float)
    return np.where(d <= cfg.D_r, cfg.a_r * (d - cfg.D_r) ** 2, 0.0)


def dv_boundary(d_r, cfg: PotentialConfig = DEFAULT_POTENTIAL):
    d = np.asarray(d_r, float)
    return np.where(d <= cfg.D_r, 2 * cfg.a_r * (d - cfg.D_r), 0.0)


def d2v_boundary(d_r, cfg: PotentialConfig = DEFAULT_POTENTIAL):
    d = np.asarray(d_r, float)
    return np.where(d <= cfg.D_r, 2 * cfg.a_r, 0.0)


def v_lane(d_l, cfg: PotentialConfig = DEFAULT_POTENTIAL):
    d = np.asarray(d_l, float)
    return cfg.a_l * np.exp(-cfg.b_l * d * d)


def dv_lane(d_l, cfg: PotentialConfig = DEFAULT_POTENTIAL):
    d = np.asarray(d_l, float)
    return -2 * cfg.b_l * d * cfg.a_l * np.exp(-cfg.b_l * d * d)


def d2v_lane(d_l, cfg: PotentialConfig = DEFAULT_POTENTIAL):
    d = np.asarray(d_l, float)
    b = cfg.b_l
    return cfg.a_l * (4 * b * b * d * d - 2 * b) * np.exp(-b * d * d)


class Polyline:
    """Euclidean distance (and its gradient) from points to an open polyline."""

    def __init__(self, points):
        self.points = np.asarray(points, float).reshape(-1, 2)
        if len(self.points) < 2:
            raise ValueError("polyline needs at least two vertices")
        self._tree = cKDTree(self.points)
        seg = np.diff(self.points, axis=0)
        self._seg = seg
        self._len2 = (seg * seg).sum(1)
        self._max_seg = float(np.sqrt(self._len2.max()))

    def closest(self, q) -> tuple[np.ndarray, np.ndarray]:
        """(distance (M,), closest point (M, 2)) for query points (M, 2)."""
        q = np.atleast_2d(np.asarray(q, float))
        n_seg = len(self._seg)
        # a handful of nearest vertices; their adjacent segments hold the closest point
        k = min(4, len(self.points))
        _, idx = self._tree.query(q, k=k)
        idx = idx.reshape(len(q), k)
        cand = np.concatenate([idx - 1, idx], axis=1).clip(0, n_seg - 1)
        a = self.points[cand]
        seg = self._seg[cand]
        t = ((q[:, None] - a) * seg).sum(-1) / self._len2[cand]
        c = a + np.clip(t, 0.0, 1.0)[..., None] * seg
        d2 = ((q[:, None] - c) ** 2).sum(-1)
        j = d2.argmin(axis=1)
        r = np.arange(len(q))
        return np.sqrt(d2[r, j]), c[r, j]

    def distance(self, q):
        return self.closest(q)[0]


def _gradient_from(q, dist, closest):
    diff = np.atleast_2d(q) - closest
    with np.errstate(invalid="ignore", divide="ignore"):
        g = diff / dist[:, None]
    return np.where(dist[:, None] > 1e-12, g, 0.0)


class Environment:
    """Static road geometry for the field: boundary and marking polylines."""

    def __init__(self, boundaries: Sequence, markings: Sequence):
        self.boundaries = [Polyline(b) for b in boundaries]
        self.markings = [Polyline(m) for m in markings]

    @classmethod
    def from_map(cls, road) -> "Environment":
        return cls(road.boundaries, road.markings)

    def static(self, points, cfg: PotentialConfig = DEFAULT_POTENTIAL, hessian: bool = False):
        """(V_r + V_l, gradient) at points (M, 2), plus 2x2 Hessians if asked.

        The Hessian keeps only the f''(d) n n^T part; the curvature of the
        distance itself (nonzero only around polyline vertices) is dropped.
        """
        q = np.atleast_2d(np.asarray(points, float))
        val = np.zeros(len(q))
        grad = np.zeros((len(q), 2))
        hess = np.zeros((len(q), 2, 2))
        terms = [(b, v_boundary, dv_boundary, d2v_boundary) for b in self.boundaries] + \
                [(m, v_lane, dv_lane, d2v_lane) for m in self.markings]
        for pl, f, df, d2f in terms:
            d, c = pl.closest(q)
            n = _gradient_from(q, d, c)
            val += f(d, cfg)
            grad += df(d, cfg)[:, None] * n
            if hessian:
                hess += d2f(d, cfg)[:, None, None] * n[:, :, None] * n[:, None, :]
        if hessian:
            return val, grad, hess
        return val, grad


def obstacle_field(points, obstacles, cfg: PotentialConfig = DEFAULT_POTENTIAL):
    """Σ_o V_o and its gradient.  points (M, 2); obstacles (M, n, 2), NaN rows absent."""
    q = np.atleast_2d(np.asarray(points, float))
    obs = np.asarray(obstacles, float)
    if obs.size == 0:
        return np.zeros(len(q)), np.zeros((len(q), 2))
    obs = obs.reshape(len(q), -1, 2)
    present = np.all(np.isfinite(obs), axis=-1)
    safe = np.where(present[..., None], obs, 0.0)
    v = np.where(present, v_obstacle(q[:, None], safe, cfg), 0.0)
    g = np.where(present[..., None], grad_v_obstacle(q[:, None], safe, cfg), 0.0)
    return v.sum(1), g.sum(1)


def u_env(p, obstacles, env: Optional[Environment], cfg: PotentialConfig = DEFAULT_POTENTIAL) -> float:
    """V_r + V_l + Σ_o V_o at one point, obstacles (n, 2)."""
    p = np.asarray(p, float).reshape(1, 2)
    obs = np.asarray(obstacles, float).reshape(1, -1, 2)
    total = obstacle_field(p, obs, cfg)[0][0]
    if env is not None:
        total += env.static(p, cfg)[0][0]
    return float(total)


def u_env_batch(points, obstacles, env: Optional[Environment], cfg: PotentialConfig = DEFAULT_POTENTIAL):
    """Values (M,) and gradients (M, 2) at per-step points with per-step obstacles."""
    v, g = obstacle_field(points, obstacles, cfg)
    if env is not None:
        vs, gs = env.static(points, cfg)
        v, g = v + vs, g + gs
    return v, g


def field_grid(env: Optional[Environment], obstacles, cfg: PotentialConfig = DEFAULT_POTENTIAL,
               xlim=(-60.0, 60.0), ylim=(-6.0, 9.0), nx: int = 241, ny: int = 61):
    """Sampled field slice (X, Y, U) for plotting, with one fixed obstacle set."""
    xs = np.linspace(*xlim, nx)
    ys = np.linspace(*ylim, ny)
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X.ravel(), Y.ravel()], 1)
    obs = np.asarray(obstacles, float).reshape(-1, 2)
    tiled = np.broadcast_to(obs, (len(pts),) + obs.shape)
    U, _ = u_env_batch(pts, tiled, env, cfg)
    return X, Y, U.reshape(X.shape)
