"""Unified scene format shared by every other module.

All quantities are SI: meters, seconds, radians. Tracks are stored as numpy
arrays sampled at the recording's native timestep; consumers resample onto
their own grid with :func:`resample_track` / :func:`interpolate_states`.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import StepError

AGENT_TYPES = ("vehicle", "pedestrian", "bicycle", "motorcycle")
TIME_TOL = 1e-9
DEFAULT_LANE_HALF_WIDTH = 1.75


def wrap_angle(a):
    """Wrap angle(s) to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True, eq=False)
class AgentTrack:
    agent_id: str
    agent_type: str
    t: np.ndarray  # (N,)
    xy: np.ndarray  # (N, 2)
    heading: np.ndarray | None = None  # (N,)
    speed: np.ndarray | None = None  # (N,)
    size: tuple[float, float] | None = None  # (length, width)
    heading_derived: bool = False

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float))
        object.__setattr__(self, "xy", np.asarray(self.xy, dtype=float).reshape(-1, 2))
        if self.heading is not None:
            object.__setattr__(self, "heading", np.asarray(self.heading, dtype=float))
        if self.speed is not None:
            object.__setattr__(self, "speed", np.asarray(self.speed, dtype=float))

    @property
    def t_start(self) -> float:
        return float(self.t[0])

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    def __len__(self):
        return len(self.t)


@dataclass(frozen=True)
class Lane:
    lane_id: str
    centerline: tuple[tuple[float, float], ...]
    successors: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class Raster:
    origin: tuple[float, float]
    resolution: float
    grid: np.ndarray  # (rows, cols) uint8, row index along +y


@dataclass(frozen=True, eq=False)
class LaneGraph:
    lanes: tuple[Lane, ...] = ()
    raster: Raster | None = None


@dataclass(frozen=True)
class GapGeometry:
    """Conflict geometry of a gap-acceptance scene.

    Each agent "reaches" the conflict point when its signed projection onto
    its own travel normal crosses zero.
    """
    point: tuple[float, float]
    ego_normal: tuple[float, float]
    circ_normal: tuple[float, float]
    ego_id: str
    circulating_id: str


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    dataset_id: str
    location_id: str
    native_dt: float
    agents: tuple[AgentTrack, ...]
    predict_agent_ids: tuple[str, ...]
    map: LaneGraph | None = None
    gap: GapGeometry | None = None
    # adapter tags: "anchor_t" (behavior anchor), "split" (predefined label), ...
    annotations: dict[str, Any] = field(default_factory=dict)

    def agent(self, agent_id: str) -> AgentTrack:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)

    @property
    def agent_ids(self) -> tuple[str, ...]:
        return tuple(a.agent_id for a in self.agents)


@dataclass(frozen=True, eq=False)
class SceneSet:
    dataset_id: str
    native_dt: float
    scenes: tuple[Scene, ...]
    provenance: tuple[str, ...] = ()

    @property
    def locations(self) -> list[str]:
        return sorted({s.location_id for s in self.scenes})

    def __len__(self):
        return len(self.scenes)


@dataclass(frozen=True)
class DataParams:
    n_I: int
    n_O: int
    dt: float
    t0_policy: str = "regular_spacing"  # first_available | behavior_anchored | regular_spacing
    gap: float = 1.0  # regular_spacing only
    lead: float = 0.0  # behavior_anchored only

    def __post_init__(self):
        if self.n_I < 2 or self.n_O < 1 or not self.dt > 0:
            raise StepError("INVALID_PARAMS", f"need n_I>=2, n_O>=1, dt>0; got {self}")
        if self.t0_policy not in ("first_available", "behavior_anchored", "regular_spacing"):
            raise StepError("INVALID_PARAMS", f"unknown t0_policy {self.t0_policy!r}")
        if self.t0_policy == "regular_spacing" and not self.gap > 0:
            raise StepError("INVALID_PARAMS", "regular_spacing gap must be > 0")

    @property
    def T_I(self) -> float:
        return self.dt * (self.n_I - 1)

    @property
    def T_O(self) -> float:
        return self.dt * self.n_O

    @classmethod
    def from_horizon(cls, T_I: float, T_O: float, dt: float, **kw) -> "DataParams":
        """Build params from observation/prediction horizons; both must be multiples of dt."""
        n_I = T_I / dt + 1
        n_O = T_O / dt
        if abs(n_I - round(n_I)) > 1e-6 or abs(n_O - round(n_O)) > 1e-6:
            raise StepError("INVALID_PARAMS", f"horizons {T_I}/{T_O} not divisible by dt={dt}")
        return cls(n_I=int(round(n_I)), n_O=int(round(n_O)), dt=dt, **kw)

    def to_dict(self) -> dict:
        return {"n_I": self.n_I, "n_O": self.n_O, "dt": self.dt, "t0_policy": self.t0_policy,
                "gap": self.gap, "lead": self.lead}


# Argoverse2 benchmark defaults and the T_I/dt grid used in the sensitivity study.
ARGOVERSE2_PARAMS = DataParams(n_I=50, n_O=60, dt=0.1)
SENSITIVITY_GRID = {
    (T_I, dt): DataParams.from_horizon(T_I, 6.0, dt)
    for T_I in (1.5, 4.5) for dt in (0.5, 0.25, 0.1)
}


# --------------------------------------------------------------------------- validation

@dataclass(frozen=True)
class Violation:
    code: str
    where: str
    message: str


def validate_scene(scene: Scene) -> list[Violation]:
    """Return every invariant violation; an empty list means the scene is valid."""
    out: list[Violation] = []

    def bad(code, where, msg):
        out.append(Violation(code, where, msg))

    if not (np.isfinite(scene.native_dt) and scene.native_dt > 0):
        bad("BAD_DT", "native_dt", f"native_dt must be > 0, got {scene.native_dt}")
    seen = set()
    for a in scene.agents:
        w = f"agents[{a.agent_id}]"
        if a.agent_id in seen:
            bad("DUPLICATE_AGENT", w, "agent id repeated")
        seen.add(a.agent_id)
        if a.agent_type not in AGENT_TYPES:
            bad("UNKNOWN_AGENT_TYPE", w, f"agent_type {a.agent_type!r}")
        n = len(a.t)
        if n == 0:
            bad("EMPTY_TRACK", w, "no states")
            continue
        if a.xy.shape != (n, 2) or any(arr is not None and arr.shape != (n,) for arr in (a.heading, a.speed)):
            bad("SHAPE", w, "state arrays disagree in length")
            continue
        arrays = [a.t, a.xy] + [arr for arr in (a.heading, a.speed) if arr is not None]
        if not all(np.all(np.isfinite(arr)) for arr in arrays):
            bad("NONFINITE", w, "non-finite state value")
        d = np.diff(a.t)
        if np.any(d <= 0):
            bad("TIMESTAMP_ORDER", w, "timestamps not strictly increasing")
        elif np.isfinite(scene.native_dt) and np.any(np.abs(d - scene.native_dt) > TIME_TOL):
            bad("TIMESTAMP_SPACING", w, "timestamps not uniformly spaced at native_dt")
        if a.size is not None and not (len(a.size) == 2 and a.size[0] > 0 and a.size[1] > 0):
            bad("BAD_SIZE", w, f"size must be positive, got {a.size}")
    for pid in scene.predict_agent_ids:
        if pid not in seen:
            bad("UNKNOWN_PREDICT_AGENT", "predict_agent_ids", f"{pid!r} is not an agent")
    if scene.map is not None:
        lane_ids = {ln.lane_id for ln in scene.map.lanes}
        for ln in scene.map.lanes:
            if len(ln.centerline) < 2:
                bad("LANE_POLYLINE", f"map.{ln.lane_id}", "centerline needs >= 2 points")
            for s in ln.successors:
                if s not in lane_ids:
                    bad("LANE_SUCCESSOR", f"map.{ln.lane_id}", f"successor {s!r} unresolved")
        if scene.map.raster is not None and not scene.map.raster.resolution > 0:
            bad("RASTER_RESOLUTION", "map.raster", "resolution must be > 0")
    if scene.gap is not None:
        for aid in (scene.gap.ego_id, scene.gap.circulating_id):
            if aid not in seen:
                bad("UNKNOWN_GAP_AGENT", "gap", f"{aid!r} is not an agent")
    return out


# --------------------------------------------------------------------------- resampling

def interpolate_states(track: AgentTrack, times) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Linear interpolation of positions (circular for heading) at ``times``.

    Returns ``(xy, heading, present)``; entries outside the recorded span are
    NaN with ``present`` False. Queries within 1e-9 s of a native timestamp
    return that native state bit-for-bit.
    """
    times = np.asarray(times, dtype=float)
    t = track.t
    xy = np.full((len(times), 2), np.nan)
    hd = np.full(len(times), np.nan)
    present = (times >= t[0] - TIME_TOL) & (times <= t[-1] + TIME_TOL)
    if not present.any():
        return xy, hd, present
    q = times[present]
    hi = np.clip(np.searchsorted(t, q), 1, len(t) - 1) if len(t) > 1 else np.zeros(len(q), int)
    lo = np.maximum(hi - 1, 0)
    if len(t) == 1:
        w = np.zeros(len(q))
    else:
        w = (q - t[lo]) / (t[hi] - t[lo])
    snap_lo = np.abs(q - t[lo]) <= TIME_TOL
    snap_hi = np.abs(q - t[hi]) <= TIME_TOL
    w = np.where(snap_lo, 0.0, np.where(snap_hi, 1.0, np.clip(w, 0.0, 1.0)))
    pts = track.xy[lo] + w[:, None] * (track.xy[hi] - track.xy[lo])
    pts[w == 0.0] = track.xy[lo][w == 0.0]
    pts[w == 1.0] = track.xy[hi][w == 1.0]
    xy[present] = pts
    if track.heading is not None:
        h0, h1 = track.heading[lo], track.heading[hi]
        h = wrap_angle(h0 + w * wrap_angle(h1 - h0))
        h = np.where(w == 0.0, h0, np.where(w == 1.0, h1, h))
        hd[present] = h
    return xy, hd, present


def resample_track(track: AgentTrack, target_dt: float, anchor_t: float) -> AgentTrack:
    """Resample onto the grid ``anchor_t + k * target_dt`` restricted to the track span."""
    if not target_dt > 0:
        raise StepError("INVALID_PARAMS", "target_dt must be > 0")
    k_lo = math.ceil((track.t_start - anchor_t) / target_dt - TIME_TOL / target_dt)
    k_hi = math.floor((track.t_end - anchor_t) / target_dt + TIME_TOL / target_dt)
    if k_hi < k_lo:
        raise StepError("EMPTY_RANGE", f"no grid time inside [{track.t_start}, {track.t_end}]")
    times = anchor_t + np.arange(k_lo, k_hi + 1) * target_dt
    xy, hd, _ = interpolate_states(track, times)
    speed = None
    if track.speed is not None:
        speed = np.interp(times, track.t, track.speed)
    return AgentTrack(track.agent_id, track.agent_type, times, xy,
                      heading=hd if track.heading is not None else None, speed=speed,
                      size=track.size, heading_derived=track.heading_derived)


def derive_heading(xy: np.ndarray) -> np.ndarray:
    """Heading from consecutive positions; the last state repeats the previous one.

    Zero-length steps inherit the previous heading.
    """
    xy = np.asarray(xy, float)
    n = len(xy)
    if n < 2:
        return np.zeros(n)
    d = np.diff(xy, axis=0)
    moving = np.hypot(d[:, 0], d[:, 1]) > 1e-9
    h = np.zeros(n - 1)
    last = 0.0
    first_moving = np.flatnonzero(moving)
    if len(first_moving):
        last = math.atan2(d[first_moving[0], 1], d[first_moving[0], 0])
    for i in range(n - 1):
        if moving[i]:
            last = math.atan2(d[i, 1], d[i, 0])
        h[i] = last
    return np.append(h, h[-1])


# --------------------------------------------------------------------------- frames

def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def to_agent_frame(points, ref) -> np.ndarray:
    """Rigid transform putting ``ref=(x, y, heading)`` at the origin facing +x."""
    x, y, h = ref
    p = np.asarray(points, float)
    return (p - np.array([x, y])) @ _rot(h)


def from_agent_frame(points, ref) -> np.ndarray:
    x, y, h = ref
    p = np.asarray(points, float)
    return p @ _rot(h).T + np.array([x, y])


# --------------------------------------------------------------------------- raster

def _segment_distance(px, py, a, b):
    """Vectorized distance from points (px, py) to segment a-b."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return np.hypot(px - ax, py - ay)
    u = np.clip(((px - ax) * dx + (py - ay) * dy) / L2, 0.0, 1.0)
    return np.hypot(px - (ax + u * dx), py - (ay + u * dy))


def rasterize_map(graph: LaneGraph | None, origin, resolution: float, extent,
                  half_width: float = DEFAULT_LANE_HALF_WIDTH) -> Raster:
    """Mark cells whose center lies within ``half_width`` of any centerline.

    ``origin`` is the lower-left corner, ``extent`` is (width, height) in meters.
    Cell value 1 = lane, 0 = background.
    """
    if not resolution > 0:
        raise StepError("INVALID_PARAMS", "resolution must be > 0")
    w, h = extent
    if not (w > 0 and h > 0):
        raise StepError("INVALID_PARAMS", "extent must be positive")
    cols, rows = int(math.ceil(w / resolution - 1e-12)), int(math.ceil(h / resolution - 1e-12))
    cx = origin[0] + (np.arange(cols) + 0.5) * resolution
    cy = origin[1] + (np.arange(rows) + 0.5) * resolution
    px, py = np.meshgrid(cx, cy)
    mask = np.zeros((rows, cols), dtype=bool)
    for lane in (graph.lanes if graph is not None else ()):
        pts = lane.centerline
        for a, b in zip(pts[:-1], pts[1:]):
            mask |= _segment_distance(px, py, a, b) <= half_width
    return Raster(tuple(origin), float(resolution), mask.astype(np.uint8))


# --------------------------------------------------------------------------- serialization

def _arr(a):
    return None if a is None else [float(v) for v in np.asarray(a).ravel()]


def scene_to_dict(scene: Scene) -> dict:
    agents = []
    for a in scene.agents:
        agents.append({
            "agent_id": a.agent_id,
            "agent_type": a.agent_type,
            "size": None if a.size is None else [float(a.size[0]), float(a.size[1])],
            "heading_derived": a.heading_derived,
            "states": {
                "t": _arr(a.t),
                "x": _arr(a.xy[:, 0]),
                "y": _arr(a.xy[:, 1]),
                "heading": _arr(a.heading),
                "speed": _arr(a.speed),
            },
        })
    d = {
        "scene_id": scene.scene_id,
        "dataset_id": scene.dataset_id,
        "location_id": scene.location_id,
        "native_dt": float(scene.native_dt),
        "predict_agent_ids": list(scene.predict_agent_ids),
        "agents": agents,
        "map": None,
        "gap": None,
        "annotations": scene.annotations,
    }
    if scene.map is not None:
        d["map"] = {
            "lanes": [{"lane_id": ln.lane_id, "centerline": [list(p) for p in ln.centerline],
                       "successors": list(ln.successors)} for ln in scene.map.lanes],
            "raster": None if scene.map.raster is None else {
                "origin": list(scene.map.raster.origin),
                "resolution": scene.map.raster.resolution,
                "grid": scene.map.raster.grid.tolist(),
            },
        }
    if scene.gap is not None:
        g = scene.gap
        d["gap"] = {"point": list(g.point), "ego_normal": list(g.ego_normal),
                    "circ_normal": list(g.circ_normal), "ego_id": g.ego_id,
                    "circulating_id": g.circulating_id}
    return d


def scene_from_dict(d: dict) -> Scene:
    agents = []
    for a in d["agents"]:
        st = a["states"]
        agents.append(AgentTrack(
            agent_id=a["agent_id"], agent_type=a["agent_type"],
            t=st["t"], xy=np.column_stack([st["x"], st["y"]]) if st["t"] else np.zeros((0, 2)),
            heading=st.get("heading"), speed=st.get("speed"),
            size=None if a.get("size") is None else tuple(a["size"]),
            heading_derived=a.get("heading_derived", False),
        ))
    gmap = None
    if d.get("map") is not None:
        m = d["map"]
        raster = None
        if m.get("raster") is not None:
            r = m["raster"]
            raster = Raster(tuple(r["origin"]), r["resolution"], np.asarray(r["grid"], dtype=np.uint8))
        gmap = LaneGraph(tuple(Lane(ln["lane_id"], tuple(tuple(p) for p in ln["centerline"]),
                                    tuple(ln["successors"])) for ln in m["lanes"]), raster)
    gap = None
    if d.get("gap") is not None:
        g = d["gap"]
        gap = GapGeometry(tuple(g["point"]), tuple(g["ego_normal"]), tuple(g["circ_normal"]),
                          g["ego_id"], g["circulating_id"])
    return Scene(d["scene_id"], d["dataset_id"], d["location_id"], d["native_dt"], tuple(agents),
                 tuple(d["predict_agent_ids"]), map=gmap, gap=gap,
                 annotations=dict(d.get("annotations") or {}))


def sceneset_to_dict(ss: SceneSet) -> dict:
    return {"dataset_id": ss.dataset_id, "native_dt": ss.native_dt,
            "scenes": [scene_to_dict(s) for s in ss.scenes]}


def save_sceneset(ss: SceneSet, directory) -> Path:
    """Write ``manifest.json``, ``scenes/<scene_id>.json`` and ``provenance.log``."""
    directory = Path(directory)
    (directory / "scenes").mkdir(parents=True, exist_ok=True)
    manifest = {"format": "step-sceneset/1", "dataset_id": ss.dataset_id,
                "locations": ss.locations, "native_dt": ss.native_dt,
                "scenes": [s.scene_id for s in ss.scenes]}
    for s in ss.scenes:
        _write_text(directory / "scenes" / f"{s.scene_id}.json", json.dumps(scene_to_dict(s), indent=1))
    _write_text(directory / "manifest.json", json.dumps(manifest, indent=1))
    _write_text(directory / "provenance.log", "".join(line + "\n" for line in ss.provenance))
    return directory


def load_sceneset(directory) -> SceneSet:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    scenes = tuple(
        scene_from_dict(json.loads((directory / "scenes" / f"{sid}.json").read_text(encoding="utf-8")))
        for sid in manifest["scenes"]
    )
    prov_path = directory / "provenance.log"
    prov = tuple(prov_path.read_text(encoding="utf-8").splitlines()) if prov_path.exists() else ()
    return SceneSet(manifest["dataset_id"], manifest["native_dt"], scenes, prov)


def _write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)

