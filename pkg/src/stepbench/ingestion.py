"""Dataset adapters (load raw / transform to scene format), gap-acceptance
behavior classification, and a synthetic scenario generator.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ParseError, StepError
from .scene import (AgentTrack, GapGeometry, Lane, LaneGraph, Scene, SceneSet, derive_heading,
                    scene_from_dict, validate_scene)

BEHAVIOR_FAMILIES = {"gap_acceptance": ("accepted", "rejected")}

DRONE_TRACK_COLUMNS = ("recordingId", "trackId", "frame", "x", "y")
DRONE_TRACK_OPTIONAL = ("heading", "width", "length", "xVelocity", "yVelocity")
DRONE_META_COLUMNS = ("recordingId", "trackId", "frameRate", "locationId", "class")
DRONE_CLASS_MAP = {
    "car": "vehicle", "truck": "vehicle", "van": "vehicle", "bus": "vehicle",
    "trailer": "vehicle", "truck_bus": "vehicle", "vehicle": "vehicle",
    "pedestrian": "pedestrian", "bicycle": "bicycle", "motorcycle": "motorcycle",
}
_NUMERIC = {"frame", "x", "y", "heading", "width", "length", "xVelocity", "yVelocity", "frameRate"}


@dataclass(frozen=True, eq=False)
class RawDataset:
    adapter_id: str
    payload: Any
    source_path: str
    provenance: tuple[str, ...] = ()


@dataclass(frozen=True)
class BehaviorClass:
    label: str
    family_id: str = "gap_acceptance"

    def __post_init__(self):
        if self.label not in BEHAVIOR_FAMILIES[self.family_id]:
            raise StepError("INVALID_LABEL", f"{self.label!r} not in {self.family_id}")


# --------------------------------------------------------------------------- D_L

def _read_csv(path: Path) -> tuple[list[str], list[tuple[int, dict]]]:
    """Parse a comma-separated file; numeric columns are converted and checked."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, "no header") from None
        header = [h.strip() for h in header]
        if not any(header):
            raise ParseError(1, "no header")
        rows = []
        for cells in reader:
            line = reader.line_num
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise ParseError(line, f"expected {len(header)} cells, got {len(cells)}")
            row = {}
            for col, cell in zip(header, cells):
                cell = cell.strip()
                if col in _NUMERIC:
                    try:
                        v = float(cell)
                    except ValueError:
                        raise ParseError(line, f"column {col!r}: non-numeric value {cell!r}") from None
                    if not math.isfinite(v):
                        raise ParseError(line, f"column {col!r}: non-finite value {cell!r}")
                    row[col] = v
                else:
                    row[col] = cell
            rows.append((line, row))
    return header, rows


def load_raw(source_path, adapter_id: str) -> RawDataset:
    """Load a dataset in its original form.

    ``drone_csv``: ``source_path`` is a directory holding ``tracks.csv`` and
    ``meta.csv`` (or the tracks file itself, with ``meta.csv`` next to it).
    ``sceneset``: a directory in the canonical serialized format.
    """
    if adapter_id not in ADAPTERS:
        raise StepError("UNKNOWN_ADAPTER", adapter_id)
    path = Path(source_path)
    if not path.exists():
        raise StepError("MISSING_FILE", str(path))
    return ADAPTERS[adapter_id][0](path)


def _load_drone_csv(path: Path) -> RawDataset:
    tracks_path = path / "tracks.csv" if path.is_dir() else path
    meta_path = tracks_path.parent / "meta.csv"
    t_header, t_rows = _read_csv(tracks_path)
    if not t_rows:
        raise ParseError(2, "no data rows")
    m_header, m_rows = _read_csv(meta_path)
    prov = (
        f"source {tracks_path}",
        f"tracks rows {len(t_rows)} columns {','.join(t_header)}",
        f"meta rows {len(m_rows)} columns {','.join(m_header)}",
    )
    payload = {"tracks_header": t_header, "tracks": t_rows, "meta_header": m_header, "meta": m_rows}
    return RawDataset("drone_csv", payload, str(tracks_path), prov)


def _load_sceneset_dir(path: Path) -> RawDataset:
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    scenes = [json.loads((path / "scenes" / f"{sid}.json").read_text(encoding="utf-8"))
              for sid in manifest["scenes"]]
    if not scenes:
        raise StepError("EMPTY_DATASET", str(path))
    return RawDataset("sceneset", {"manifest": manifest, "scenes": scenes}, str(path),
                      (f"source {path}", f"scenes {len(scenes)}"))


# --------------------------------------------------------------------------- D_T

def transform_to_internal(raw: RawDataset, **options) -> SceneSet:
    if raw.adapter_id not in ADAPTERS:
        raise StepError("UNKNOWN_ADAPTER", raw.adapter_id)
    ss = ADAPTERS[raw.adapter_id][1](raw, **options)
    for scene in ss.scenes:
        report = validate_scene(scene)
        if report:
            raise StepError("SCHEMA_MISMATCH", f"scene {scene.scene_id}: {report[0].code} {report[0].message}")
    return ss


def _transform_drone_csv(raw: RawDataset, scene_mode: str = "recording", dataset_id: str | None = None) -> SceneSet:
    p = raw.payload
    missing = [c for c in DRONE_TRACK_COLUMNS if c not in p["tracks_header"]]
    missing += [f"meta.{c}" for c in DRONE_META_COLUMNS if c not in p["meta_header"]]
    if missing:
        raise StepError("SCHEMA_MISMATCH", f"required columns absent: {missing}")
    dataset_id = dataset_id or Path(raw.source_path).parent.name or "drone"

    meta: dict[tuple[str, str], dict] = {}
    rec_info: dict[str, tuple[float, str]] = {}
    for line, row in p["meta"]:
        key = (row["recordingId"], row["trackId"])
        if key in meta:
            raise StepError("SCHEMA_MISMATCH", f"duplicate agent id {key[1]} in recording {key[0]} (meta line {line})")
        cls = row["class"].lower()
        if cls not in DRONE_CLASS_MAP:
            raise StepError("SCHEMA_MISMATCH", f"unknown class {row['class']!r} (meta line {line})")
        meta[key] = row
        info = (row["frameRate"], row["locationId"])
        if rec_info.setdefault(row["recordingId"], info) != info:
            raise StepError("SCHEMA_MISMATCH", f"recording {row['recordingId']}: inconsistent frameRate/locationId")

    grouped: dict[tuple[str, str], list[dict]] = defaultdict(list)
    for line, row in p["tracks"]:
        grouped[(row["recordingId"], row["trackId"])].append(row | {"_line": line})

    has = {c: c in p["tracks_header"] for c in DRONE_TRACK_OPTIONAL}
    by_rec: dict[str, list[AgentTrack]] = defaultdict(list)
    n_states = 0
    for key in sorted(grouped, key=lambda k: (k[0], _natural(k[1]))):
        rows = sorted(grouped[key], key=lambda r: r["frame"])
        if key not in meta:
            raise StepError("SCHEMA_MISMATCH", f"track {key[1]} of recording {key[0]} has no meta row")
        frames = np.array([r["frame"] for r in rows])
        if np.any(np.diff(frames) == 0):
            raise StepError("SCHEMA_MISMATCH", f"duplicate agent id {key[1]} in recording {key[0]} (repeated frame)")
        if np.any(np.diff(frames) != 1):
            raise StepError("SCHEMA_MISMATCH", f"track {key[1]} of recording {key[0]} has non-contiguous frames")
        rate, _ = rec_info[key[0]]
        xy = np.array([[r["x"], r["y"]] for r in rows])
        if has["heading"]:
            heading = np.deg2rad([r["heading"] for r in rows])
            derived = False
        else:
            heading = derive_heading(xy)
            derived = True
        speed = None
        if has["xVelocity"] and has["yVelocity"]:
            speed = np.array([math.hypot(r["xVelocity"], r["yVelocity"]) for r in rows])
        size = None
        if has["width"] and has["length"]:
            size = (rows[0]["length"], rows[0]["width"])
        by_rec[key[0]].append(AgentTrack(
            agent_id=key[1], agent_type=DRONE_CLASS_MAP[meta[key]["class"].lower()],
            t=frames / rate, xy=xy, heading=heading, speed=speed, size=size, heading_derived=derived))
        n_states += len(rows)

    scenes = []
    rates = set()
    for rec in sorted(by_rec, key=_natural):
        rate, loc = rec_info[rec]
        rates.add(rate)
        agents = tuple(by_rec[rec])
        movers = tuple(a.agent_id for a in agents if a.agent_type != "pedestrian")
        if scene_mode == "recording":
            scenes.append(Scene(f"rec{rec}", dataset_id, str(loc), 1.0 / rate, agents, movers))
        elif scene_mode == "per_track":
            for a in agents:
                if a.agent_type == "pedestrian":
                    continue
                others = tuple(b for b in agents if b.t_end >= a.t_start and b.t_start <= a.t_end)
                scenes.append(Scene(f"rec{rec}_track{a.agent_id}", dataset_id, str(loc), 1.0 / rate,
                                    others, (a.agent_id,)))
        else:
            raise StepError("CONFIG_ERROR", f"unknown scene_mode {scene_mode!r}")
    if len(rates) != 1:
        raise StepError("SCHEMA_MISMATCH", f"recordings disagree on frameRate: {sorted(rates)}")
    prov = raw.provenance + (
        f"scenes {len(scenes)} agents {sum(len(v) for v in by_rec.values())} states {n_states}",
        "dropped rows 0",
        "units: heading deg->rad, time = frame/frameRate",
    )
    return SceneSet(dataset_id, 1.0 / rates.pop(), tuple(scenes), prov)


def _transform_sceneset(raw: RawDataset) -> SceneSet:
    m = raw.payload["manifest"]
    scenes = tuple(scene_from_dict(d) for d in raw.payload["scenes"])
    n_states = sum(len(a.t) for s in scenes for a in s.agents)
    return SceneSet(m["dataset_id"], m["native_dt"], scenes,
                    raw.provenance + (f"states {n_states}", "dropped rows 0"))


def _natural(s: str):
    try:
        return (0, int(s), s)
    except ValueError:
        return (1, 0, s)


ADAPTERS = {
    "drone_csv": (_load_drone_csv, _transform_drone_csv),
    "sceneset": (_load_sceneset_dir, _transform_sceneset),
}


# --------------------------------------------------------------------------- D_B

def crossing_time(times, xy, point, normal) -> float | None:
    """First time the signed projection onto ``normal`` reaches zero from below.

    Sub-step crossing times are linearly interpolated. A trajectory that
    starts beyond the line is extrapolated back from its first step; ``None``
    means the line is never reached within the span.
    """
    times = np.asarray(times, float)
    xy = np.asarray(xy, float)
    ok = np.all(np.isfinite(xy), axis=1)
    times, xy = times[ok], xy[ok]
    if len(times) == 0:
        return None
    n = np.asarray(normal, float)
    n = n / np.hypot(*n)
    s = (xy - np.asarray(point, float)) @ n
    if s[0] >= 0:
        if len(s) > 1 and s[1] > s[0]:
            rate = (s[1] - s[0]) / (times[1] - times[0])
            return float(times[0] - s[0] / rate)
        return float(times[0])
    idx = np.flatnonzero((s[:-1] < 0) & (s[1:] >= 0))
    if len(idx) == 0:
        return None
    i = idx[0]
    return float(times[i] + (-s[i]) / (s[i + 1] - s[i]) * (times[i + 1] - times[i]))


def classify_gap(geometry: GapGeometry, ego_t, ego_xy, circ_t, circ_xy) -> BehaviorClass:
    """Accepted iff the entering agent reaches the conflict point strictly first."""
    te = crossing_time(ego_t, ego_xy, geometry.point, geometry.ego_normal)
    tc = crossing_time(circ_t, circ_xy, geometry.point, geometry.circ_normal)
    if te is None and tc is None:
        raise StepError("UNDECIDED", "neither agent reaches the conflict point")
    if tc is None or (te is not None and te < tc):
        return BehaviorClass("accepted")
    return BehaviorClass("rejected")


def classify_behavior_gap(scene: Scene, ego_t, ego_xy, circulating_id: str | None = None) -> BehaviorClass:
    """Classify an entering-agent trajectory against the scene's recorded circulating agent."""
    if scene.gap is None:
        raise StepError("NO_BEHAVIOR_FAMILY", f"scene {scene.scene_id} has no conflict geometry")
    circ = scene.agent(circulating_id or scene.gap.circulating_id)
    return classify_gap(scene.gap, ego_t, ego_xy, circ.t, circ.xy)


# --------------------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticConfig:
    scenario_kind: str = "straight_road"  # straight_road | roundabout_gap
    scene_count: int = 10
    agents_per_scene: int = 3
    native_dt: float = 0.1
    duration: float = 12.0
    noise_sigma: float = 0.0
    seed: int = 0
    dataset_id: str = "synthetic"
    location_id: str = "loc0"
    speed_changes: int = 1  # straight_road: velocity changes per agent (0 = exactly linear)
    gap_profile: str = "mixed"  # roundabout_gap: mixed | accept | reject
    predefined_test_fraction: float | None = None  # tag scenes with annotations["split"]
    speed_range: tuple[float, float] = (5.0, 15.0)

    def __post_init__(self):
        if self.scene_count < 1 or self.agents_per_scene < 1:
            raise StepError("CONFIG_ERROR", "scene_count and agents_per_scene must be >= 1")
        if self.scenario_kind == "roundabout_gap" and self.agents_per_scene < 2:
            raise StepError("CONFIG_ERROR", "roundabout_gap needs agents_per_scene >= 2")
        if self.scenario_kind not in ("straight_road", "roundabout_gap"):
            raise StepError("CONFIG_ERROR", f"unknown scenario_kind {self.scenario_kind!r}")
        if self.gap_profile not in ("mixed", "accept", "reject"):
            raise StepError("CONFIG_ERROR", f"unknown gap_profile {self.gap_profile!r}")
        if not (self.native_dt > 0 and self.duration >= 2 * self.native_dt and self.noise_sigma >= 0):
            raise StepError("CONFIG_ERROR", "need native_dt > 0, duration >= 2*native_dt, noise_sigma >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        if "speed_range" in d:
            d["speed_range"] = tuple(d["speed_range"])
        return cls(**d)


def _rigid(points, phi, offset):
    c, s = math.cos(phi), math.sin(phi)
    R = np.array([[c, -s], [s, c]])
    return np.asarray(points, float) @ R.T + offset


_RAMP_ACCEL = 1.5  # m/s^2, straight-road speed changes


def _straight_scene(cfg: SyntheticConfig, rng: np.random.Generator, idx: int, t: np.ndarray) -> Scene:
    phi = rng.uniform(-math.pi, math.pi)
    offset = rng.uniform(-50, 50, size=2)
    agents = []
    for j in range(cfg.agents_per_scene):
        lane = j % 2
        direction = 1.0 if lane == 0 else -1.0
        lat = -1.75 if lane == 0 else 1.75
        v0 = rng.uniform(*cfg.speed_range)
        x0 = rng.uniform(-60.0, -20.0) * direction
        change_t = np.sort(rng.uniform(0.5, cfg.duration - 0.5, size=cfg.speed_changes))
        speeds = [v0]
        for _ in change_t:
            speeds.append(float(np.clip(speeds[-1] + rng.uniform(-2.0, 2.0), 1.0, None)))
        # speed ramps at a constant _RAMP_ACCEL; exact integration by superposition
        dv = np.diff(speeds)
        tau = np.maximum(np.abs(dv), 1e-12) / _RAMP_ACCEL
        for i in range(1, len(change_t)):  # ramps never overlap
            change_t[i] = max(change_t[i], change_t[i - 1] + tau[i - 1])
        u = t[:, None] - change_t[None, :]
        ramp_s = np.where(u <= 0, 0.0, np.where(u <= tau, u ** 2 / (2 * tau), u - tau / 2))
        s = v0 * t + ramp_s @ dv
        speed = v0 + np.clip(u / tau, 0.0, 1.0) @ dv
        local = np.column_stack([x0 + direction * s, np.full_like(t, lat)])
        xy = _rigid(local, phi, offset)
        if cfg.noise_sigma > 0:
            xy = xy + rng.normal(0.0, cfg.noise_sigma, size=xy.shape)
        h = math.atan2(math.sin(phi + (0 if direction > 0 else math.pi)),
                       math.cos(phi + (0 if direction > 0 else math.pi)))
        agents.append(AgentTrack(f"a{j}", "vehicle", t.copy(), xy, heading=np.full(len(t), h),
                                 speed=speed, size=(4.5, 1.8)))
    lanes = tuple(
        Lane(f"lane{k}", tuple(map(tuple, _rigid([[-100.0 * d, lat], [100.0 * d, lat]], phi, offset))))
        for k, (d, lat) in enumerate(((1.0, -1.75), (-1.0, 1.75)))
    )
    ann = {}
    if cfg.predefined_test_fraction is not None:
        ann["split"] = "test" if rng.uniform() < cfg.predefined_test_fraction else "train"
    return Scene(f"s{idx:04d}", cfg.dataset_id, cfg.location_id, cfg.native_dt, tuple(agents),
                 tuple(a.agent_id for a in agents), map=LaneGraph(lanes), annotations=ann)


# ego approaches the conflict point along +y, circulating traffic moves along +x
_T_ANCHOR = 5.0
_EGO_SPEED = 8.0
_EGO_ANCHOR_DIST = 20.0
_CIRC_SPEED = 10.0
_STOP_GAP = 3.0
_EGO_ACCEL = 2.0


def _ego_profile(t: np.ndarray, accept: bool, t_circ: float) -> np.ndarray:
    """Signed distance past the conflict line (negative = before) for the entering agent."""
    s0 = -(_EGO_ANCHOR_DIST + _EGO_SPEED * _T_ANCHOR)
    if accept:
        return s0 + _EGO_SPEED * t
    d_brake = _EGO_ANCHOR_DIST - _STOP_GAP
    decel = _EGO_SPEED ** 2 / (2 * d_brake)
    t_stop = _T_ANCHOR + _EGO_SPEED / decel
    t_go = max(t_circ + 1.0, t_stop)
    s = np.empty_like(t)
    before = t <= _T_ANCHOR
    s[before] = s0 + _EGO_SPEED * t[before]
    braking = (t > _T_ANCHOR) & (t <= t_stop)
    tb = t[braking] - _T_ANCHOR
    s[braking] = -_EGO_ANCHOR_DIST + _EGO_SPEED * tb - 0.5 * decel * tb ** 2
    waiting = (t > t_stop) & (t <= t_go)
    s[waiting] = -_STOP_GAP
    going = t > t_go
    tg = t[going] - t_go
    s[going] = -_STOP_GAP + 0.5 * _EGO_ACCEL * tg ** 2
    return s


def _gap_scene(cfg: SyntheticConfig, rng: np.random.Generator, idx: int, t: np.ndarray) -> Scene:
    if cfg.gap_profile == "mixed":
        accept = bool(rng.uniform() < 0.5)
    else:
        accept = cfg.gap_profile == "accept"
    gap = rng.uniform(3.5, 6.0) if accept else rng.uniform(0.5, 2.0)
    t_circ = _T_ANCHOR + gap
    phi = rng.uniform(-math.pi, math.pi)
    offset = rng.uniform(-50, 50, size=2)
    s_ego = _ego_profile(t, accept, t_circ)
    ego_local = np.column_stack([np.zeros_like(t), s_ego])
    tracks_local = [("ego", ego_local), ("circ", np.column_stack([_CIRC_SPEED * (t - t_circ), np.zeros_like(t)]))]
    for j in range(cfg.agents_per_scene - 2):
        shift = (j // 2 + 1) * 35.0 * (1 if j % 2 == 0 else -1)
        tracks_local.append((f"b{j}", np.column_stack([_CIRC_SPEED * (t - t_circ) + shift, np.zeros_like(t)])))
    agents = []
    for aid, local in tracks_local:
        xy = _rigid(local, phi, offset)
        if cfg.noise_sigma > 0:
            xy = xy + rng.normal(0.0, cfg.noise_sigma, size=xy.shape)
        heading = derive_heading(_rigid(local, phi, offset))
        agents.append(AgentTrack(aid, "vehicle", t.copy(), xy, heading=heading, size=(4.5, 1.8),
                                 heading_derived=True))
    point = tuple(_rigid([[0.0, 0.0]], phi, offset)[0])
    rot = _rigid([[0.0, 1.0], [1.0, 0.0]], phi, np.zeros(2))
    geom = GapGeometry(point, tuple(rot[0]), tuple(rot[1]), "ego", "circ")
    ego_cross = crossing_time(t, ego_local, (0, 0), (0, 1))
    ann: dict[str, Any] = {
        "anchor_t": _T_ANCHOR,
        "behavior_label": "accepted" if accept else "rejected",
        "ego_cross_t": ego_cross,
        "circ_cross_t": t_circ,
    }
    if cfg.predefined_test_fraction is not None:
        ann["split"] = "test" if rng.uniform() < cfg.predefined_test_fraction else "train"
    lanes = (
        Lane("entry", tuple(map(tuple, _rigid([[0.0, -80.0], [0.0, 0.0]], phi, offset))), ("exit",)),
        Lane("exit", tuple(map(tuple, _rigid([[0.0, 0.0], [0.0, 40.0]], phi, offset)))),
        Lane("circulating", tuple(map(tuple, _rigid([[-120.0, 0.0], [120.0, 0.0]], phi, offset)))),
    )
    return Scene(f"g{idx:04d}", cfg.dataset_id, cfg.location_id, cfg.native_dt, tuple(agents),
                 ("ego", "circ"), map=LaneGraph(lanes), gap=geom, annotations=ann)


def generate_synthetic(config: SyntheticConfig) -> SceneSet:
    """Deterministic synthetic scene set for the configured scenario kind."""
    rng = np.random.default_rng(config.seed)
    n = int(round(config.duration / config.native_dt)) + 1
    t = np.arange(n) * config.native_dt
    make = _straight_scene if config.scenario_kind == "straight_road" else _gap_scene
    scenes = tuple(make(config, rng, i, t) for i in range(config.scene_count))
    prov = (f"synthetic {config.scenario_kind} seed {config.seed} scenes {len(scenes)}",)
    return SceneSet(config.dataset_id, config.native_dt, scenes, prov)
