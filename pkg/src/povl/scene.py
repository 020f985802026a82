"""Road maps, vehicle tracks, merging scenarios and a synthetic merge generator.

Track CSV schema (one row per vehicle per frame)::

    frame,id,x,y,vx,vy,ax,ay,lane_id,width,length

Frames are integers at ``fps_in``; ingestion keeps every ``fps_in / 5``-th
global frame and renumbers frames to the 5 fps grid.  The road map lives in a
JSON sidecar (see :meth:`RoadMap.to_json`).
"""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .geometry import (
    OutOfRoadError,
    ReferencePath,
    SegmentKind,
    associate_path,
    make_path_pair,
)

FPS = 5
DT = 1.0 / FPS
CSV_COLUMNS = ("frame", "id", "x", "y", "vx", "vy", "ax", "ay", "lane_id", "width", "length")
MAP_VERSION = 1


class IngestionError(ValueError):
    pass


class GenerationError(ValueError):
    pass


class ScenarioError(ValueError):
    pass


class LaneType(enum.IntEnum):
    NO_LANE = 0
    NORMAL = 1
    EXPECT_MERGING = 2
    MERGE = 3


@dataclass(frozen=True)
class Lane:
    id: int
    path: SegmentKind
    center: float
    width: float
    type: LaneType
    s_min: float = -math.inf
    s_max: float = math.inf
    left: Optional[tuple[int, float, float]] = None
    right: Optional[tuple[int, float, float]] = None
    nominal_speed: float = 25.0

    def covers(self, s: float) -> bool:
        return self.s_min <= s <= self.s_max


@dataclass(eq=False)
class RoadMap:
    paths: dict[SegmentKind, ReferencePath]
    lanes: dict[int, Lane]
    boundaries: list[np.ndarray] = field(default_factory=list)
    markings: list[np.ndarray] = field(default_factory=list)
    target_lane: Optional[int] = None

    @property
    def path_list(self) -> list[ReferencePath]:
        return [self.paths[k] for k in (SegmentKind.SLIP_ROAD, SegmentKind.MAIN_CARRIAGEWAY)
                if k in self.paths]

    def lane(self, lane_id: int) -> Lane:
        try:
            return self.lanes[int(lane_id)]
        except KeyError:
            raise KeyError(f"lane {lane_id} is not in the map") from None

    def neighbor(self, lane_id: int, side: str, s: float) -> Optional[Lane]:
        link = getattr(self.lane(lane_id), side)
        if link is None:
            return None
        other, lo, hi = link
        if not lo <= s <= hi:
            return None
        other = self.lane(other)
        return other if other.covers(s) else None

    def lane_ids_of_type(self, *types: LaneType) -> set[int]:
        return {l.id for l in self.lanes.values() if l.type in types}

    def to_json(self) -> str:
        def finite(v):
            return None if not math.isfinite(v) else v

        doc = {
            "version": MAP_VERSION,
            "paths": {
                k.value: {"points": p.points.tolist(), "d_min": p.d_min, "d_max": p.d_max}
                for k, p in self.paths.items()
            },
            "lanes": [
                {"id": l.id, "path": l.path.value, "center": l.center, "width": l.width,
                 "type": int(l.type), "s_min": finite(l.s_min), "s_max": finite(l.s_max),
                 "left": list(l.left) if l.left else None,
                 "right": list(l.right) if l.right else None,
                 "nominal_speed": l.nominal_speed}
                for l in sorted(self.lanes.values(), key=lambda l: l.id)
            ],
            "boundaries": [b.tolist() for b in self.boundaries],
            "markings": [m.tolist() for m in self.markings],
            "target_lane": self.target_lane,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RoadMap":
        doc = json.loads(text)
        if doc.get("version") != MAP_VERSION:
            raise IngestionError(f"unsupported map version {doc.get('version')!r}")
        raw = doc["paths"]
        slip = raw.get(SegmentKind.SLIP_ROAD.value)
        main = raw[SegmentKind.MAIN_CARRIAGEWAY.value]
        if slip is None:
            paths = {SegmentKind.MAIN_CARRIAGEWAY: ReferencePath(
                np.asarray(main["points"], float), SegmentKind.MAIN_CARRIAGEWAY,
                main["d_min"], main["d_max"])}
        else:
            paths = make_path_pair(slip["points"], main["points"],
                                   (slip["d_min"], slip["d_max"]),
                                   (main["d_min"], main["d_max"]))

        def link(v):
            return None if v is None else (int(v[0]), float(v[1]), float(v[2]))

        def bound(v, default):
            return default if v is None else float(v)

        lanes = {}
        for l in doc["lanes"]:
            lanes[int(l["id"])] = Lane(
                int(l["id"]), SegmentKind(l["path"]), float(l["center"]), float(l["width"]),
                LaneType(int(l["type"])), bound(l.get("s_min"), -math.inf),
                bound(l.get("s_max"), math.inf), link(l.get("left")), link(l.get("right")),
                float(l.get("nominal_speed", 25.0)))
        return cls(paths, lanes,
                   [np.asarray(b, float) for b in doc.get("boundaries", [])],
                   [np.asarray(m, float) for m in doc.get("markings", [])],
                   doc.get("target_lane"))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RoadMap":
        return cls.from_json(Path(path).read_text())


@dataclass(eq=False)
class Track:
    """Kinematic history of one vehicle on the 5 fps grid."""

    vehicle_id: int
    frames: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    acc: np.ndarray
    lane_id: np.ndarray
    length: float = 4.5
    width: float = 1.8
    fps: float = FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.pos = np.asarray(self.pos, dtype=float).reshape(-1, 2)
        self.vel = np.asarray(self.vel, dtype=float).reshape(-1, 2)
        self.acc = np.asarray(self.acc, dtype=float).reshape(-1, 2)
        self.lane_id = np.asarray(self.lane_id, dtype=np.int64)
        n = len(self.frames)
        if not (len(self.pos) == len(self.vel) == len(self.acc) == len(self.lane_id) == n):
            raise ValueError(f"track {self.vehicle_id}: column lengths differ")
        if n > 1 and np.any(np.diff(self.frames) != 1):
            raise ValueError(f"track {self.vehicle_id}: frames must be consecutive")
        for name in ("pos", "vel", "acc"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"track {self.vehicle_id}: non-finite {name}")

    def __len__(self):
        return len(self.frames)

    @property
    def times(self) -> np.ndarray:
        return self.frames / self.fps

    @property
    def first_frame(self) -> int:
        return int(self.frames[0])

    @property
    def last_frame(self) -> int:
        return int(self.frames[-1])

    def has_frame(self, frame: int) -> bool:
        return self.first_frame <= frame <= self.last_frame

    def index(self, frame: int) -> int:
        if not self.has_frame(frame):
            raise KeyError(f"track {self.vehicle_id} has no frame {frame}")
        return int(frame - self.first_frame)


# -- CSV ingestion -----------------------------------------------------------

def _float(value, row_no, col):
    try:
        v = float(value)
    except ValueError:
        raise IngestionError(f"row {row_no}: column {col!r} is not a number: {value!r}") from None
    if not math.isfinite(v):
        raise IngestionError(f"row {row_no}: column {col!r} is not finite")
    return v


def _int(value, row_no, col):
    v = _float(value, row_no, col)
    if v != int(v):
        raise IngestionError(f"row {row_no}: column {col!r} must be an integer")
    return int(v)


def read_tracks(source, fps_in: float = 25.0, fps_out: float = FPS) -> dict[int, Track]:
    """Parse the canonical CSV and downsample to ``fps_out``."""
    step = fps_in / fps_out
    if abs(step - round(step)) > 1e-9 or step < 1:
        raise IngestionError(f"fps_in={fps_in} is not an integer multiple of {fps_out}")
    step = int(round(step))
    if isinstance(source, (str, Path)):
        text = Path(source).read_text()
    else:
        text = source.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise IngestionError("empty track file") from None
    header = [h.strip() for h in header]
    if tuple(header) != CSV_COLUMNS:
        raise IngestionError(f"header {header} does not match schema {list(CSV_COLUMNS)}")
    rows: dict[int, list] = {}
    last_frame: dict[int, int] = {}
    for row_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise IngestionError(f"row {row_no}: expected {len(CSV_COLUMNS)} columns, got {len(row)}")
        frame = _int(row[0], row_no, "frame")
        vid = _int(row[1], row_no, "id")
        vals = [_float(row[i], row_no, CSV_COLUMNS[i]) for i in range(2, 8)]
        lane = _int(row[8], row_no, "lane_id")
        width = _float(row[9], row_no, "width")
        length = _float(row[10], row_no, "length")
        prev = last_frame.get(vid)
        if prev is not None:
            if frame <= prev:
                raise IngestionError(f"row {row_no}: frames of vehicle {vid} are not increasing "
                                     f"({prev} then {frame})")
            if frame != prev + 1:
                raise IngestionError(f"row {row_no}: vehicle {vid} has a gap between frames "
                                     f"{prev} and {frame}")
        last_frame[vid] = frame
        rows.setdefault(vid, []).append((frame, *vals, lane, width, length))
    tracks = {}
    for vid, rs in rows.items():
        kept = [r for r in rs if r[0] % step == 0]
        if not kept:
            continue
        a = np.array([r[:7] for r in kept], dtype=float)
        tracks[vid] = Track(vid, (a[:, 0].astype(np.int64) // step), a[:, 1:3], a[:, 3:5],
                            a[:, 5:7], [r[7] for r in kept], length=kept[0][9],
                            width=kept[0][8], fps=fps_out)
    return tracks


def ingest_tracks(file, fps_in: float = 25.0) -> dict[int, Track]:
    return read_tracks(file, fps_in=fps_in)


def tracks_to_csv(tracks) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for vid in sorted(tracks):
        tr = tracks[vid]
        for i in range(len(tr)):
            w.writerow([int(tr.frames[i]), vid, repr(float(tr.pos[i, 0])), repr(float(tr.pos[i, 1])),
                        repr(float(tr.vel[i, 0])), repr(float(tr.vel[i, 1])),
                        repr(float(tr.acc[i, 0])), repr(float(tr.acc[i, 1])),
                        int(tr.lane_id[i]), repr(float(tr.width)), repr(float(tr.length))])
    return buf.getvalue()


def write_tracks(tracks, path):
    Path(path).write_text(tracks_to_csv(tracks))


# -- scenarios -------------------------------------------------------------

@dataclass(eq=False)
class Scenario:
    map: RoadMap
    tracks: dict[int, Track]
    ego_id: int
    start_frame: int
    duration: float = 5.0
    scenario_id: str = "scenario"
    target_lane: Optional[int] = None

    @property
    def t0(self) -> float:
        return self.start_frame * DT

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / DT))

    @property
    def ego(self) -> Track:
        return self.tracks[self.ego_id]

    def target(self) -> Lane:
        lane_id = self.target_lane if self.target_lane is not None else self.map.target_lane
        if lane_id is None:
            raise ScenarioError(f"{self.scenario_id}: no target lane")
        return self.map.lane(lane_id)

    def validate(self) -> "Scenario":
        if self.ego_id not in self.tracks:
            raise ScenarioError(f"{self.scenario_id}: ego {self.ego_id} has no track")
        ego = self.ego
        end = self.start_frame + self.n_steps
        if not (ego.has_frame(self.start_frame) and ego.has_frame(end)):
            raise ScenarioError(f"{self.scenario_id}: ego track does not cover "
                                f"[{self.t0:.1f}, {self.t0 + self.duration:.1f}] s")
        self.target()
        return self

    def others(self) -> list[Track]:
        return [self.tracks[v] for v in sorted(self.tracks) if v != self.ego_id]


def save_scenario(scn: Scenario, directory, share_files: bool = False) -> Path:
    """Write ``<id>.scenario.json`` (plus map.json and tracks.csv) into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if not share_files or not (d / "map.json").exists():
        scn.map.save(d / "map.json")
        write_tracks(scn.tracks, d / "tracks.csv")
    doc = {"id": scn.scenario_id, "map": "map.json", "tracks": "tracks.csv",
           "ego_id": scn.ego_id, "start_frame": scn.start_frame, "duration": scn.duration,
           "target_lane": scn.target_lane}
    out = d / f"{scn.scenario_id}.scenario.json"
    out.write_text(json.dumps(doc, indent=1))
    return out


def load_scenario(path) -> Scenario:
    path = Path(path)
    doc = json.loads(path.read_text())
    road = RoadMap.load(path.parent / doc["map"])
    tracks = read_tracks(path.parent / doc["tracks"], fps_in=FPS)
    return Scenario(road, tracks, int(doc["ego_id"]), int(doc["start_frame"]),
                    float(doc.get("duration", 5.0)), doc["id"], doc.get("target_lane")).validate()


def load_scenarios(directory) -> list[Scenario]:
    files = sorted(Path(directory).rglob("*.scenario.json"))
    return sorted((load_scenario(f) for f in files), key=lambda s: s.scenario_id)


def _merges(track: Track, road: RoadMap) -> bool:
    merge_ids = road.lane_ids_of_type(LaneType.MERGE)
    main_ids = road.lane_ids_of_type(LaneType.NORMAL, LaneType.EXPECT_MERGING)
    lanes = track.lane_id
    if not len(lanes) or lanes[0] not in merge_ids or lanes[-1] not in main_ids:
        return False
    return bool(np.any(np.isin(lanes[:-1], list(merge_ids)) & np.isin(lanes[1:], list(main_ids))))


def extract_merging_scenarios(tracks: dict[int, Track], road: RoadMap, every: int = 5,
                              duration: float = 5.0, prefix: str = "scn") -> list[Scenario]:
    """One scenario per admissible start frame of every merging vehicle.

    Start frames are every ``every``-th frame of the vehicle's merge-lane phase
    alongside the main carriageway, restricted so the ego covers ``duration``.
    """
    if SegmentKind.SLIP_ROAD not in road.paths:
        raise ScenarioError("map has no slip road")
    slip = road.paths[SegmentKind.SLIP_ROAD]
    n = int(round(duration / DT))
    merge_ids = road.lane_ids_of_type(LaneType.MERGE)
    out = []
    for vid in sorted(tracks):
        tr = tracks[vid]
        if not _merges(tr, road):
            continue
        s, _, _ = slip.project(tr.pos)
        phase = [i for i in range(len(tr))
                 if tr.lane_id[i] in merge_ids
                 and road.neighbor(int(tr.lane_id[i]), "left", float(s[i])) is not None]
        if not phase:
            continue
        target = int(tr.lane_id[-1])
        for i in phase[::every]:
            frame = int(tr.frames[i])
            if tr.has_frame(frame + n):
                out.append(Scenario(road, tracks, vid, frame, duration,
                                    f"{prefix}_{vid:04d}_{frame:05d}", target))
    return out
