"""Kinematic lane-merge environment.

Straight, parallel lanes along the x axis. The merging vehicle starts on the
merge lane (acceleration ramp) and must slot between a preceding and a
following vehicle on the target lane before the ramp ends. The controlled
vehicle integrates uniformly-accelerated motion per 0.1 s step; the other
vehicles replay recorded frames, extended at constant speed once the
recording runs out.
"""

from __future__ import annotations

import csv
import json
import math
import uuid as uuidlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import wire
from .kinematics import advance
from .types import (RoadUserDescription, Source, new_uuid, normalize_heading,
                    TWO_PI)

EPOCH_MS = 1_700_000_000_000


class Action(Enum):
    ACCELERATE = 0
    DECELERATE = 1
    TURN_LEFT = 2
    TURN_RIGHT = 3
    DO_NOTHING = 4


ACTIONS: tuple[Action, ...] = tuple(Action)
N_ACTIONS = len(ACTIONS)


class Outcome(Enum):
    IN_PROGRESS = "in_progress"
    SUCCESS = "success"
    COLLISION = "collision"
    LANE_END = "lane_end"
    TIMEOUT = "timeout"


class InstanceSource(Enum):
    IMPORTED = "imported_trajectory_data"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class LaneGeometry:
    """Centerlines of the two lanes and where the merge lane runs out."""

    merge_lane_y: float = 3.5
    target_lane_y: float = 0.0
    merge_end_x: float = 200.0
    lane_width: float = 3.5

    def on_target_lane(self, y: float) -> bool:
        return abs(y - self.target_lane_y) <= self.lane_width / 2.0


@dataclass(frozen=True)
class EnvParams:
    dt: float = 0.1                  # s per step
    accel_step: float = 1.0          # m/s^2 added per Accelerate/Decelerate
    a_min: float = -4.0
    a_max: float = 3.0
    turn_step: float = math.radians(2.0)
    max_heading_dev: float = math.radians(20.0)
    d_safe: float = 10.0             # bumper-to-bumper safety gap, m
    max_steps: int = 150


ROLE_MERGING = "merging"
ROLE_PRECEDING = "preceding"
ROLE_FOLLOWING = "following"
ROLES = (ROLE_MERGING, ROLE_PRECEDING, ROLE_FOLLOWING)


@dataclass(frozen=True)
class MergeInstance:
    """One merge episode: chronological frames of ground-truth RUDs with the
    three labelled role vehicles present in every frame."""

    instance_id: str
    timestep: float
    frames: tuple[tuple[RoadUserDescription, ...], ...]
    roles: dict[str, uuidlib.UUID]
    source: InstanceSource

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("instance must have at least one frame")
        if set(self.roles) != set(ROLES):
            raise ValueError(f"roles must be exactly {ROLES}")
        ids = list(self.roles.values())
        if len(set(ids)) != 3:
            raise ValueError("role uuids must be distinct")
        step_ms = round(self.timestep * 1000.0)
        prev_t = None
        for k, frame in enumerate(self.frames):
            present = {r.uuid for r in frame}
            for role, uid in self.roles.items():
                if uid not in present:
                    raise ValueError(f"{role} vehicle missing from frame {k}")
            t = frame[0].timestamp
            if any(r.timestamp != t for r in frame):
                raise ValueError(f"frame {k} timestamps are not aligned")
            if prev_t is not None and abs((t - prev_t) - step_ms) > 1:
                raise ValueError(f"frame {k} not spaced by timestep")
            prev_t = t

    def frame_rud(self, k: int, role: str) -> RoadUserDescription:
        uid = self.roles[role]
        for r in self.frames[k]:
            if r.uuid == uid:
                return r
        raise KeyError(role)  # unreachable: constructor checks presence


@dataclass(frozen=True)
class EnvState:
    merging: RoadUserDescription
    preceding: RoadUserDescription
    following: RoadUserDescription
    steps: int
    geometry: LaneGeometry
    outcome: Outcome = Outcome.IN_PROGRESS

    @property
    def done(self) -> bool:
        return self.outcome is not Outcome.IN_PROGRESS


def _rect_corners(r: RoadUserDescription) -> np.ndarray:
    c, s = math.cos(r.heading), math.sin(r.heading)
    hl, hw = r.length / 2.0, r.width / 2.0
    ax = np.array([c, s])
    ay = np.array([-s, c])
    center = np.array(r.position)
    return np.array([center + sx * hl * ax + sy * hw * ay
                     for sx in (1, -1) for sy in (1, -1)])


def rectangles_overlap(a: RoadUserDescription, b: RoadUserDescription) -> bool:
    """Separating-axis test on the two oriented footprints."""
    ca, cb = _rect_corners(a), _rect_corners(b)
    for r in (a, b):
        c, s = math.cos(r.heading), math.sin(r.heading)
        for axis in (np.array([c, s]), np.array([-s, c])):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def front_bumper(r: RoadUserDescription) -> float:
    return r.x + r.length / 2.0


def rear_bumper(r: RoadUserDescription) -> float:
    return r.x - r.length / 2.0


def merge_point(preceding: RoadUserDescription, following: RoadUserDescription,
                geometry: LaneGeometry) -> tuple[float, float]:
    """Longitudinal midpoint of the usable gap, on the target centerline."""
    gap_lo = front_bumper(following)
    gap_hi = rear_bumper(preceding)
    if gap_hi - gap_lo <= 0.0:
        raise ValueError("no gap: preceding is not ahead of following")
    return ((gap_lo + gap_hi) / 2.0, geometry.target_lane_y)


def detect_outcome(merging: RoadUserDescription,
                   preceding: RoadUserDescription,
                   following: RoadUserDescription,
                   steps: int, geometry: LaneGeometry,
                   params: EnvParams) -> Outcome:
    """Classify the state; collision dominates, then success, lane end,
    timeout."""
    if rectangles_overlap(merging, preceding) or \
            rectangles_overlap(merging, following):
        return Outcome.COLLISION
    on_lane = geometry.on_target_lane(merging.y)
    if on_lane:
        gap_ahead = rear_bumper(preceding) - front_bumper(merging)
        gap_behind = rear_bumper(merging) - front_bumper(following)
        if gap_ahead >= params.d_safe and gap_behind >= params.d_safe:
            return Outcome.SUCCESS
    if not on_lane and front_bumper(merging) >= geometry.merge_end_x:
        return Outcome.LANE_END
    if steps >= params.max_steps:
        return Outcome.TIMEOUT
    return Outcome.IN_PROGRESS


def _heading_dev(heading: float) -> float:
    """Signed deviation from the road axis, in (-pi, pi]."""
    dev = math.fmod(heading, TWO_PI)
    if dev > math.pi:
        dev -= TWO_PI
    elif dev <= -math.pi:
        dev += TWO_PI
    return dev


class MergeEnv:
    """Steps the merging vehicle under agent control while the gap vehicles
    replay their recorded frames."""

    def __init__(self, instance: MergeInstance, params: EnvParams = EnvParams(),
                 geometry: Optional[LaneGeometry] = None):
        self.instance = instance
        self.params = params
        self.geometry = geometry or default_geometry_for(instance)

    def reset(self) -> EnvState:
        st = EnvState(
            merging=self.instance.frame_rud(0, ROLE_MERGING),
            preceding=self.instance.frame_rud(0, ROLE_PRECEDING),
            following=self.instance.frame_rud(0, ROLE_FOLLOWING),
            steps=0,
            geometry=self.geometry,
        )
        outcome = detect_outcome(st.merging, st.preceding, st.following,
                                 st.steps, self.geometry, self.params)
        return replace(st, outcome=outcome)

    def _replayed(self, role: str, k: int) -> RoadUserDescription:
        frames = self.instance.frames
        if k < len(frames):
            return self.instance.frame_rud(k, role)
        # recording exhausted: continue at constant speed from the last frame
        last = self.instance.frame_rud(len(frames) - 1, role)
        extra = k - (len(frames) - 1)
        dt = self.instance.timestep * extra
        x, y, speed = advance(last.x, last.y, last.speed, 0.0, last.heading, dt)
        return replace(last, position=(x, y), speed=speed, acceleration=0.0,
                       timestamp=last.timestamp + round(dt * 1000.0))

    def step(self, state: EnvState, action: Action) -> EnvState:
        if state.done:
            raise ValueError("cannot step a finished episode")
        p = self.params
        m = state.merging
        accel = m.acceleration
        heading = m.heading
        if action is Action.ACCELERATE:
            accel = min(p.a_max, accel + p.accel_step)
        elif action is Action.DECELERATE:
            accel = max(p.a_min, accel - p.accel_step)
        elif action is Action.TURN_LEFT:
            dev = max(-p.max_heading_dev, _heading_dev(heading) - p.turn_step)
            heading = normalize_heading(dev)
        elif action is Action.TURN_RIGHT:
            dev = min(p.max_heading_dev, _heading_dev(heading) + p.turn_step)
            heading = normalize_heading(dev)

        x, y, speed = advance(m.x, m.y, m.speed, accel, heading, p.dt)
        k = state.steps + 1
        merging = replace(m, position=(x, y), speed=speed, acceleration=accel,
                          heading=heading,
                          timestamp=m.timestamp + round(p.dt * 1000.0))
        preceding = self._replayed(ROLE_PRECEDING, k)
        following = self._replayed(ROLE_FOLLOWING, k)
        outcome = detect_outcome(merging, preceding, following, k,
                                 self.geometry, p)
        return EnvState(merging=merging, preceding=preceding,
                        following=following, steps=k,
                        geometry=self.geometry, outcome=outcome)


def default_geometry_for(instance: MergeInstance) -> LaneGeometry:
    """Geometry embedded by the synthetic generator, or the defaults."""
    meta = _GEOMETRY_BY_INSTANCE.get(instance.instance_id)
    return meta if meta is not None else LaneGeometry()


# Synthetic instances carry their own ramp length; keyed by instance id so
# MergeInstance stays a pure data record.
_GEOMETRY_BY_INSTANCE: dict[str, LaneGeometry] = {}


def register_geometry(instance_id: str, geometry: LaneGeometry) -> None:
    _GEOMETRY_BY_INSTANCE[instance_id] = geometry


# ------------------------------------------------------------- generation

_CAR_LENGTH = 4.6
_CAR_WIDTH = 1.8


def _mk_rud(uid, t, x, y, speed, accel, heading, lane, connected, source,
            length=_CAR_LENGTH, width=_CAR_WIDTH):
    return RoadUserDescription(
        uuid=uid, source=source, timestamp=t, position=(x, y),
        speed=max(0.0, speed), acceleration=accel, heading=heading,
        length=length, width=width, lane=lane, connected=connected)


def generate_synthetic(seed: int, n: int,
                       geometry: Optional[LaneGeometry] = None
                       ) -> list[MergeInstance]:
    """Deterministic synthetic merge instances.

    Lane speeds are drawn in [8, 30] m/s and initial bumper gaps in
    [20, 80] m; each instance runs ~70 frames at 0.1 s and includes a
    scripted merging trajectory plus 0-2 unconnected bystanders.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    instances = []
    for i in range(n):
        instances.append(_synthesize_one(rng, f"syn-{seed}-{i}", geometry))
    return instances


def _synthesize_one(rng: np.random.Generator, instance_id: str,
                    geometry: Optional[LaneGeometry]) -> MergeInstance:
    dt = 0.1
    v_lane = float(rng.uniform(8.0, 30.0))
    v_merge = float(np.clip(v_lane + rng.uniform(-3.0, 3.0), 8.0, 30.0))
    gap = float(rng.uniform(20.0, 80.0))
    # recorded merges play out within the ~7 s window, so the vehicle starts
    # close to its gap rather than chasing it from far behind
    offset = float(rng.uniform(0.0, 12.0))
    n_frames = int(rng.integers(66, 75))
    ramp = float(rng.uniform(150.0, 250.0))

    geo = geometry or LaneGeometry(merge_end_x=ramp)
    register_geometry(instance_id, geo)

    uid_m, uid_p, uid_f = (new_uuid(rng) for _ in range(3))
    n_bystanders = int(rng.integers(0, 3))
    bystanders = []
    for b in range(n_bystanders):
        side = 1 if rng.random() < 0.5 else -1
        dist = float(rng.uniform(40.0, 120.0))
        bystanders.append({
            "uuid": new_uuid(rng),
            "x0": offset + side * (gap / 2.0 + _CAR_LENGTH + dist),
            "v": float(np.clip(v_lane + rng.uniform(-2.0, 2.0), 5.0, 32.0)),
        })

    # gap vehicle centers, bumper gap measured front(following)..rear(preceding)
    x_mid0 = offset
    x_p0 = x_mid0 + gap / 2.0 + _CAR_LENGTH / 2.0
    x_f0 = x_mid0 - gap / 2.0 - _CAR_LENGTH / 2.0

    # scripted merging driver for the recorded trajectory
    mx, my, mv, mh, ma = 0.0, geo.merge_lane_y, v_merge, 0.0, 0.0
    frames = []
    for k in range(n_frames):
        t = EPOCH_MS + round(k * dt * 1000.0)
        x_p = x_p0 + v_lane * k * dt
        x_f = x_f0 + v_lane * k * dt
        frame = [
            _mk_rud(uid_m, t, mx, my, mv, ma, mh, lane=0, connected=True,
                    source=Source.CONNECTED_VEHICLE),
            _mk_rud(uid_p, t, x_p, geo.target_lane_y, v_lane, 0.0, 0.0,
                    lane=1, connected=True, source=Source.CONNECTED_VEHICLE),
            _mk_rud(uid_f, t, x_f, geo.target_lane_y, v_lane, 0.0, 0.0,
                    lane=1, connected=True, source=Source.CONNECTED_VEHICLE),
        ]
        for b in bystanders:
            frame.append(_mk_rud(b["uuid"], t, b["x0"] + b["v"] * k * dt,
                                 geo.target_lane_y, b["v"], 0.0, 0.0,
                                 lane=1, connected=False,
                                 source=Source.CAMERA_SYSTEM))
        frames.append(tuple(sorted(frame, key=lambda r: str(r.uuid))))

        # advance the scripted driver
        x_mid = (x_p - _CAR_LENGTH / 2.0 + x_f + _CAR_LENGTH / 2.0) / 2.0
        aligned = abs(mx - x_mid) < 4.0 and abs(mv - v_lane) < 2.0
        if aligned and abs(my - geo.target_lane_y) > 0.05:
            mh = normalize_heading(-math.radians(8.0))
        elif abs(my - geo.target_lane_y) <= 0.05:
            mh = 0.0
            my = geo.target_lane_y
        ma = float(np.clip(0.25 * (x_mid - mx) + 1.0 * (v_lane - mv), -2.5, 2.5))
        mx, my, mv = advance(mx, my, mv, ma, mh, dt)

    return MergeInstance(instance_id=instance_id, timestep=dt,
                         frames=tuple(frames),
                         roles={ROLE_MERGING: uid_m, ROLE_PRECEDING: uid_p,
                                ROLE_FOLLOWING: uid_f},
                         source=InstanceSource.SYNTHETIC)


def split_dataset(instances: Sequence[MergeInstance],
                  ratios: tuple[float, float, float],
                  seed: int = 0) -> tuple[list[MergeInstance],
                                          list[MergeInstance],
                                          list[MergeInstance]]:
    """Random, disjoint, exhaustive train/test/validation partition."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    order = list(instances)
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    n = len(order)
    b1 = round(n * ratios[0])
    b2 = round(n * (ratios[0] + ratios[1]))
    return order[:b1], order[b1:b2], order[b2:]


# ----------------------------------------------------------------- import

CSV_COLUMNS = ("vehicle_id", "frame", "x", "y", "speed", "accel", "heading",
               "length", "width", "lane")


@dataclass(frozen=True)
class ImportRules:
    merge_lane: int = 0
    target_lane: int = 1
    timestep: float = 0.1
    max_frames_before: int = 55
    max_frames_after: int = 15


@dataclass
class ImportReport:
    instances: list[MergeInstance] = field(default_factory=list)
    rows_read: int = 0
    rows_skipped: int = 0


def _vehicle_uuid(vehicle_id: str) -> uuidlib.UUID:
    return uuidlib.uuid5(uuidlib.NAMESPACE_OID, f"lanemerge-import:{vehicle_id}")


def import_instances(path: str, rules: ImportRules = ImportRules()) -> ImportReport:
    """Extract merge instances from a trajectory CSV.

    A merge is a vehicle whose lane column switches from the merge lane to
    the target lane; preceding/following are the nearest target-lane
    vehicles at the transition frame. Malformed rows are skipped and
    counted; zero extracted instances is an error.
    """
    by_frame: dict[int, dict[str, tuple]] = {}
    lane_of: dict[str, dict[int, int]] = {}
    report = ImportReport()
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ValueError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or \
                set(CSV_COLUMNS) - set(reader.fieldnames):
            raise ValueError(f"CSV must have columns {CSV_COLUMNS}")
        for row in reader:
            report.rows_read += 1
            try:
                vid = row["vehicle_id"].strip()
                frame = int(row["frame"])
                vals = (float(row["x"]), float(row["y"]), float(row["speed"]),
                        float(row["accel"]), float(row["heading"]),
                        float(row["length"]), float(row["width"]),
                        int(row["lane"]))
                if not vid or vals[5] <= 0 or vals[6] <= 0 or vals[2] < 0:
                    raise ValueError("bad values")
            except (ValueError, TypeError, AttributeError, KeyError):
                report.rows_skipped += 1
                continue
            by_frame.setdefault(frame, {})[vid] = vals
            lane_of.setdefault(vid, {})[frame] = vals[7]

    merges = []
    for vid, lanes in lane_of.items():
        frames_sorted = sorted(lanes)
        for a, b in zip(frames_sorted, frames_sorted[1:]):
            if lanes[a] == rules.merge_lane and lanes[b] == rules.target_lane:
                merges.append((vid, b))
                break

    for idx, (vid, f_star) in enumerate(merges):
        inst = _extract_instance(vid, f_star, by_frame, rules,
                                 f"imp-{idx}-{vid}")
        if inst is not None:
            report.instances.append(inst)
    if not report.instances:
        raise ValueError("no merge instances found in file")
    return report


def _extract_instance(vid: str, f_star: int, by_frame, rules: ImportRules,
                      instance_id: str) -> Optional[MergeInstance]:
    row = by_frame.get(f_star, {}).get(vid)
    if row is None:
        return None
    mx = row[0]
    # bracket the merging vehicle on the target lane at the transition frame
    ahead, behind = None, None
    for ovid, vals in by_frame[f_star].items():
        if ovid == vid or vals[7] != rules.target_lane:
            continue
        if vals[0] > mx and (ahead is None or vals[0] < ahead[1][0]):
            ahead = (ovid, vals)
        if vals[0] < mx and (behind is None or vals[0] > behind[1][0]):
            behind = (ovid, vals)
    if ahead is None or behind is None:
        return None

    trio = (vid, ahead[0], behind[0])
    lo = f_star
    while lo - 1 in by_frame and all(v in by_frame[lo - 1] for v in trio) \
            and f_star - (lo - 1) <= rules.max_frames_before:
        lo -= 1
    hi = f_star
    while hi + 1 in by_frame and all(v in by_frame[hi + 1] for v in trio) \
            and (hi + 1) - f_star <= rules.max_frames_after:
        hi += 1
    if hi - lo < 2:
        return None

    step_ms = round(rules.timestep * 1000.0)
    frames = []
    for k, f in enumerate(range(lo, hi + 1)):
        t = EPOCH_MS + k * step_ms
        frame = []
        for ovid, vals in sorted(by_frame[f].items()):
            x, y, speed, accel, heading, length, width, lane = vals
            frame.append(_mk_rud(
                _vehicle_uuid(ovid), t, x, y, speed, accel,
                normalize_heading(heading), lane=lane,
                connected=ovid in trio,
                source=Source.CONNECTED_VEHICLE if ovid in trio
                else Source.CAMERA_SYSTEM,
                length=length, width=width))
        frames.append(tuple(sorted(frame, key=lambda r: str(r.uuid))))
    return MergeInstance(
        instance_id=instance_id, timestep=rules.timestep,
        frames=tuple(frames),
        roles={ROLE_MERGING: _vehicle_uuid(vid),
               ROLE_PRECEDING: _vehicle_uuid(ahead[0]),
               ROLE_FOLLOWING: _vehicle_uuid(behind[0])},
        source=InstanceSource.IMPORTED)


# ------------------------------------------------------- (de)serialization

def save_instances(path: str, instances: Sequence[MergeInstance]) -> None:
    """Write instances as NDJSON, one instance per line."""
    with open(path, "w") as fh:
        for inst in instances:
            geo = default_geometry_for(inst)
            obj = {
                "instance_id": inst.instance_id,
                "timestep": inst.timestep,
                "source": inst.source.value,
                "roles": {k: str(v) for k, v in inst.roles.items()},
                "geometry": [geo.merge_lane_y, geo.target_lane_y,
                             geo.merge_end_x, geo.lane_width],
                "frames": [[wire._rud_to_obj(r) for r in frame]
                           for frame in inst.frames],
            }
            fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_instances(path: str) -> list[MergeInstance]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            frames = tuple(
                tuple(wire._rud_from_obj(r) for r in frame)
                for frame in obj["frames"])
            inst = MergeInstance(
                instance_id=obj["instance_id"],
                timestep=obj["timestep"],
                frames=frames,
                roles={k: uuidlib.UUID(v) for k, v in obj["roles"].items()},
                source=InstanceSource(obj["source"]))
            g = obj["geometry"]
            register_geometry(inst.instance_id, LaneGeometry(
                merge_lane_y=g[0], target_lane_y=g[1], merge_end_x=g[2],
                lane_width=g[3]))
            out.append(inst)
    return out
