"""Frenet <-> Cartesian conversion on a pair of polyline reference paths.

Each road segment (slip road, main carriageway) carries its own reference
polyline.  Along-track ``s`` is measured from a shared origin, the crossing
point of the two polylines, so ``s`` is negative upstream of the merge.

Between vertices the path normal is interpolated linearly from the vertex
bisectors.  That makes ``to_cartesian`` and ``to_frenet`` exact inverses of
each other inside the corridor instead of leaving wedge-shaped blind spots at
convex vertices.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree


class SegmentKind(str, enum.Enum):
    SLIP_ROAD = "slip_road"
    MAIN_CARRIAGEWAY = "main_carriageway"


class GeometryError(ValueError):
    pass


class OutOfRoadError(GeometryError):
    pass


class ExtrapolationError(GeometryError):
    pass


class ExtrapolationWarning(UserWarning):
    pass


MIN_SPACING = 1e-9


@dataclass(frozen=True)
class FrenetState:
    s: float
    d: float
    associated_path: SegmentKind
    extrapolated: bool = False


@dataclass(frozen=True, eq=False)
class ReferencePath:
    """Arc-length parametrised polyline.

    ``d_min``/``d_max`` bound the drivable corridor around the path (positive
    to the left of the travel direction).  ``origin_arclength`` is the arc
    length of the shared origin's projection; ``s = arclength - origin``.
    """

    points: np.ndarray
    segment_kind: SegmentKind
    d_min: float = -1.75
    d_max: float = 1.75
    origin_arclength: float = 0.0
    cumulative_arclength: np.ndarray = field(init=False, repr=False)
    _normals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise GeometryError("reference path needs at least two 2-D points")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("reference path contains non-finite points")
        seg = np.diff(pts, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lengths <= MIN_SPACING):
            i = int(np.argmin(lengths))
            raise GeometryError(f"consecutive points {i} and {i + 1} coincide")
        if self.d_min >= self.d_max:
            raise GeometryError("corridor bounds must satisfy d_min < d_max")
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        seg_n = np.stack([-seg[:, 1], seg[:, 0]], axis=1) / lengths[:, None]
        normals = np.empty_like(pts)
        normals[0] = seg_n[0]
        normals[-1] = seg_n[-1]
        bis = seg_n[:-1] + seg_n[1:]
        bis_len = np.hypot(bis[:, 0], bis[:, 1])
        if np.any(bis_len < 1e-6):
            raise GeometryError("reference path folds back on itself")
        normals[1:-1] = bis / bis_len[:, None]
        pts.setflags(write=False)
        cum.setflags(write=False)
        normals.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "cumulative_arclength", cum)
        object.__setattr__(self, "_normals", normals)
        object.__setattr__(self, "_tree", cKDTree(pts))
        object.__setattr__(self, "_max_seg", float(lengths.max()))
        object.__setattr__(self, "_min_seg", float(lengths.min()))

    @classmethod
    def from_points(cls, points, kind, half_width: float = 1.75, **kw) -> "ReferencePath":
        kind = SegmentKind(kind)
        return cls(np.asarray(points, dtype=float), kind, -half_width, half_width, **kw)

    @property
    def length(self) -> float:
        return float(self.cumulative_arclength[-1])

    @property
    def s_range(self) -> tuple[float, float]:
        return -self.origin_arclength, self.length - self.origin_arclength

    @property
    def half_width(self) -> float:
        return min(-self.d_min, self.d_max)

    def with_origin(self, origin_arclength: float) -> "ReferencePath":
        return ReferencePath(self.points, self.segment_kind, self.d_min, self.d_max,
                             float(origin_arclength))

    def in_corridor(self, d, margin: float = 0.0):
        return (d >= self.d_min - margin) & (d <= self.d_max + margin)

    # -- core maps --------------------------------------------------------

    def project(self, points):
        """Vectorised Cartesian -> (s, d, extrapolated) for an (M, 2) array."""
        q = np.atleast_2d(np.asarray(points, dtype=float))
        n_seg = len(self.points) - 1
        if len(q) == 0:
            return np.empty(0), np.empty(0), np.empty(0, dtype=bool)
        r, near = self._tree.query(q)
        out = [np.empty(len(q)), np.empty(len(q)), np.empty(len(q), dtype=bool)]
        # Any segment closer than the nearest vertex lies within this index window.
        half = np.ceil((1.5 * r + self._max_seg) / self._min_seg).astype(np.int64) + 1
        order = np.argsort(half, kind="stable")
        for lo in range(0, len(q), 256):
            sel = order[lo:lo + 256]
            k = min(int(half[sel].max()), n_seg)
            offs = np.arange(-k, k)
            idx = np.clip(near[sel, None] + offs[None, :], 0, n_seg - 1)
            res = self._solve(q[sel], idx)
            for o, v in zip(out, res):
                o[sel] = v
        return tuple(out)

    def _solve(self, q, idx):
        a = self.points[idx]
        e = self.points[idx + 1] - a
        na = self._normals[idx]
        m = self._normals[idx + 1] - na
        w = q[:, None, :] - a
        cross = lambda u, v: u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]
        qa = -cross(na, m)
        qb = cross(w, m) - cross(na, e)
        qc = cross(w, e)
        # Smallest-|d| root of qa d^2 + qb d + qc = 0, in a cancellation-free form.
        disc = qb * qb - 4.0 * qa * qc
        valid = disc >= 0.0
        sq = np.sqrt(np.where(valid, disc, 0.0))
        den = -(qb + np.copysign(sq, qb))
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(den != 0.0, 2.0 * qc / den, 0.0)
            dirv = e + d[..., None] * m
            t = ((w - d[..., None] * na) * dirv).sum(-1) / (dirv * dirv).sum(-1)
        tol = 1e-12
        inside = valid & (t >= -tol) & (t <= 1.0 + tol)
        score = np.where(inside, np.abs(d), np.inf)
        best = np.argmin(score, axis=1)
        rows = np.arange(len(q))
        ok = np.isfinite(score[rows, best])
        if not np.all(ok):
            # Beyond the path ends: fall back to the Euclidean-nearest candidate.
            tc = np.clip(((w * e).sum(-1) / (e * e).sum(-1)), 0.0, 1.0)
            dist = np.linalg.norm(w - tc[..., None] * e, axis=-1)
            near = np.argmin(dist, axis=1)
            best = np.where(ok, best, near)
            d_lin = cross(e, w) / np.linalg.norm(e, axis=-1)
            d = np.where(ok[:, None], d, d_lin)
        seg = idx[rows, best]
        tb = np.clip(t[rows, best], 0.0, 1.0)
        db = d[rows, best]
        seg_len = self.cumulative_arclength[1:] - self.cumulative_arclength[:-1]
        s = self.cumulative_arclength[seg] + tb * seg_len[seg] - self.origin_arclength
        return s, db, ~ok

    def evaluate(self, s, d=0.0):
        """Vectorised (s, d) -> Cartesian; raises on s outside the path."""
        s = np.asarray(s, dtype=float)
        d = np.asarray(d, dtype=float)
        arc = s + self.origin_arclength
        lo_tol = 1e-9 * max(1.0, self.length)
        if np.any(arc < -lo_tol) or np.any(arc > self.length + lo_tol):
            raise ExtrapolationError(
                f"s outside path range [{self.s_range[0]:.3f}, {self.s_range[1]:.3f}]")
        arc = np.clip(arc, 0.0, self.length)
        cum = self.cumulative_arclength
        i = np.clip(np.searchsorted(cum, arc, side="right") - 1, 0, len(cum) - 2)
        t = (arc - cum[i]) / (cum[i + 1] - cum[i])
        p = self.points[i] + t[..., None] * (self.points[i + 1] - self.points[i])
        n = self._normals[i] + t[..., None] * (self._normals[i + 1] - self._normals[i])
        return p + d[..., None] * n

    def tangent(self, s):
        """Unit tangent of the segment containing ``s`` (clamped to the path)."""
        arc = np.clip(np.asarray(s, dtype=float) + self.origin_arclength, 0.0, self.length)
        cum = self.cumulative_arclength
        i = np.clip(np.searchsorted(cum, arc, side="right") - 1, 0, len(cum) - 2)
        e = self.points[i + 1] - self.points[i]
        return e / np.linalg.norm(e, axis=-1, keepdims=True)


def to_frenet(position, path: ReferencePath) -> FrenetState:
    s, d, ext = path.project(np.asarray(position, dtype=float).reshape(1, 2))
    if ext[0]:
        warnings.warn(f"projection beyond the ends of the {path.segment_kind.value} path",
                      ExtrapolationWarning, stacklevel=2)
    return FrenetState(float(s[0]), float(d[0]), path.segment_kind, bool(ext[0]))


def to_cartesian(f: FrenetState, path: ReferencePath) -> np.ndarray:
    return path.evaluate(np.array([f.s]), np.array([f.d]))[0]


def _choose(cands, previous, hysteresis, where):
    # cands: (path, |d|, d, on_path) per reference path
    order = lambda c: (c[1], 0 if c[0].segment_kind is SegmentKind.MAIN_CARRIAGEWAY else 1)
    inside = [c for c in cands if c[3] and c[0].in_corridor(c[2])]
    if previous is not None:
        prev = [c for c in cands if c[0].segment_kind is previous
                and c[3] and c[0].in_corridor(c[2], hysteresis)]
        if prev:
            best_abs = min(c[1] for c in inside) if inside else np.inf
            if prev[0][1] <= best_abs + hysteresis:
                return previous
    if not inside:
        raise OutOfRoadError(f"position {where} lies outside every road corridor")
    return min(inside, key=order)[0].segment_kind


def associate_path(position, paths: Sequence[ReferencePath],
                   previous: Optional[SegmentKind] = None,
                   hysteresis: float = 0.5) -> SegmentKind:
    """Pick the reference path whose corridor contains ``position``.

    Smaller |d| wins, ties go to the main carriageway.  With ``previous``
    given, the previous association is kept while the point stays within
    that corridor widened by ``hysteresis`` and the alternative is not
    closer by more than ``hysteresis`` metres.
    """
    p = np.asarray(position, dtype=float).reshape(1, 2)
    cands = []
    for path in paths:
        _, d, ext = path.project(p)
        cands.append((path, abs(float(d[0])), float(d[0]), not bool(ext[0])))
    prev = None if previous is None else SegmentKind(previous)
    return _choose(cands, prev, hysteresis, p[0].tolist())


def associate_sequence(points, paths: Sequence[ReferencePath], hysteresis: float = 0.5,
                       projections=None) -> list[SegmentKind]:
    """Frame-by-frame association of a trajectory, carrying the hysteresis.

    ``projections`` may supply precomputed ``path.project(points)`` results
    in the same order as ``paths``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if projections is None:
        projections = [path.project(pts) for path in paths]
    out, prev = [], None
    for i in range(len(pts)):
        cands = [(path, abs(float(d[i])), float(d[i]), not bool(x[i]))
                 for path, (_, d, x) in zip(paths, projections)]
        prev = _choose(cands, prev, hysteresis, pts[i].tolist())
        out.append(prev)
    return out


def polyline_intersection(p: np.ndarray, q: np.ndarray) -> Optional[tuple[np.ndarray, float]]:
    """First point along ``p`` where it meets ``q``: (point, arclength on p)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    qa, qe = q[:-1], np.diff(q, axis=0)
    cum_p = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(p, axis=0).T))])
    for i in range(len(p) - 1):
        a, e = p[i], p[i + 1] - p[i]
        den = e[0] * qe[:, 1] - e[1] * qe[:, 0]
        w = qa - a
        num_t = w[:, 0] * qe[:, 1] - w[:, 1] * qe[:, 0]
        num_u = w[:, 0] * e[1] - w[:, 1] * e[0]
        ts = []
        par = np.abs(den) < 1e-12 * (np.hypot(*e) * np.hypot(qe[:, 0], qe[:, 1]) + 1e-300)
        nz = ~par
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num_t / den
            u = num_u / den
        hit = nz & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
        if np.any(hit):
            ts.append(float(t[hit].min()))
        colinear = par & (np.abs(num_u) < 1e-9 * np.hypot(*e) * (np.hypot(w[:, 0], w[:, 1]) + 1.0))
        for j in np.nonzero(colinear)[0]:
            ee = float(e @ e)
            t_a = float((qa[j] - a) @ e) / ee
            t_b = float((qa[j] + qe[j] - a) @ e) / ee
            lo, hi = max(0.0, min(t_a, t_b)), min(1.0, max(t_a, t_b))
            if lo <= hi:
                ts.append(lo)
        if ts:
            t_min = min(ts)
            return a + t_min * e, cum_p[i] + t_min * np.hypot(*e)
    return None


def make_path_pair(slip_points, main_points, slip_corridor=(-1.75, 1.75),
                   main_corridor=(-1.75, 1.75)) -> dict[SegmentKind, ReferencePath]:
    """Build both reference paths with the shared crossing-point origin.

    If the polylines never meet, the midpoint of their closest pair of
    vertices stands in for the crossing.
    """
    slip = ReferencePath(np.asarray(slip_points, float), SegmentKind.SLIP_ROAD, *slip_corridor)
    main = ReferencePath(np.asarray(main_points, float), SegmentKind.MAIN_CARRIAGEWAY,
                         *main_corridor)
    hit = polyline_intersection(slip.points, main.points)
    if hit is not None:
        origin = hit[0]
    else:
        dd = np.linalg.norm(slip.points[:, None, :] - main.points[None, :, :], axis=-1)
        i, j = np.unravel_index(np.argmin(dd), dd.shape)
        origin = 0.5 * (slip.points[i] + main.points[j])
    out = {}
    for path in (slip, main):
        s, _, _ = path.project(origin.reshape(1, 2))
        out[path.segment_kind] = path.with_origin(float(s[0]))
    return out
